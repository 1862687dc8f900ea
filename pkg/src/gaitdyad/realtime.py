"""Streaming inference: a 50-frame ring buffer fed by an ingest thread, read by a ticking predictor.

Wire format (both directions): little-endian ``<QQ8f`` = sequence number,
timestamp in microseconds, eight float32 features. Outputs reuse the layout
and carry the sequence number of the newest input frame in the window.
"""

from __future__ import annotations

import gc
import io
import logging
import socket
import struct
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .therapist import N_FEATURES, WIN, StModel, predict

log = logging.getLogger(__name__)

FRAME = struct.Struct("<QQ8f")
FRAME_SIZE = FRAME.size  # 48
DEFAULT_RATE = 333.0


class InsufficientData(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameMessage:
    seq: int
    ts_us: int
    values: tuple

    def __post_init__(self):
        if len(self.values) != N_FEATURES:
            raise ValueError(f"frame needs {N_FEATURES} values, got {len(self.values)}")

    def pack(self) -> bytes:
        return FRAME.pack(self.seq, self.ts_us, *self.values)

    @classmethod
    def unpack(cls, data: bytes) -> "FrameMessage":
        if len(data) != FRAME_SIZE:
            raise ValueError(f"frame must be {FRAME_SIZE} bytes, got {len(data)}")
        seq, ts, *vals = FRAME.unpack(data)
        return cls(seq, ts, tuple(vals))

    def to_csv(self) -> str:
        return ",".join([str(self.seq), str(self.ts_us), *(repr(float(v)) for v in self.values)])

    @classmethod
    def from_csv(cls, line: str) -> "FrameMessage":
        parts = line.strip().split(",")
        if len(parts) != 2 + N_FEATURES:
            raise ValueError(f"expected {2 + N_FEATURES} fields, got {len(parts)}")
        # round through float32 so text and binary inputs agree
        return cls(int(parts[0]), int(parts[1]), tuple(float(np.float32(v)) for v in parts[2:]))


def frames_from_series(series, rate=DEFAULT_RATE, start_seq=1):
    """FrameMessages for an (N, 8) feature series sampled at ``rate``."""
    series = np.asarray(series, dtype=np.float32)
    return [FrameMessage(start_seq + i, int(round(i * 1e6 / rate)), tuple(map(float, row))) for i, row in enumerate(series)]


def write_frames(path, frames, text=False):
    with open(path, "w" if text else "wb") as fh:
        for f in frames:
            fh.write(f.to_csv() + "\n" if text else f.pack())


def read_frames(stream, text=False):
    """Yield frames from a binary or text stream until EOF; a trailing partial frame is an error."""
    if text:
        for line in stream:
            line = line.decode() if isinstance(line, bytes) else line
            if line.strip() and not line.startswith("seq"):
                yield FrameMessage.from_csv(line)
        return
    while True:
        data = _read_exact(stream, FRAME_SIZE)
        if data is None:
            return
        yield FrameMessage.unpack(data)


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if buf:
                raise ValueError(f"truncated frame: {len(buf)} of {n} bytes")
            return None
        buf += chunk
    return buf


class RingBuffer:
    """Fixed-capacity FIFO of feature frames; pushes and snapshots are serialised by one lock."""

    def __init__(self, capacity: int = WIN, n_features: int = N_FEATURES):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data = np.zeros((capacity, n_features))
        self._seq = np.zeros(capacity, dtype=np.int64)
        self._ts = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # next write position
        self._count = 0
        self._last_seq = -1
        self.rejected = 0
        self.pushed = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self._count

    @property
    def last_seq(self):
        return self._last_seq

    def push(self, seq: int, ts_us: int, values) -> bool:
        """Append a frame; a sequence number not above the last accepted one is rejected and counted."""
        values = np.asarray(values, dtype=float)
        with self._lock:
            if seq <= self._last_seq:
                self.rejected += 1
                return False
            i = self._head
            self._data[i] = values
            self._seq[i] = seq
            self._ts[i] = ts_us
            self._head = (i + 1) % self.capacity
            self._count = min(self._count + 1, self.capacity)
            self._last_seq = seq
            self.pushed += 1
            return True

    def push_frame(self, frame: FrameMessage) -> bool:
        return self.push(frame.seq, frame.ts_us, frame.values)

    def snapshot(self):
        """(X, seqs, ts) for the newest ``capacity`` frames, oldest first."""
        with self._lock:
            if self._count < self.capacity:
                raise InsufficientData(f"insufficient data: {self._count} of {self.capacity} frames")
            order = (self._head + np.arange(self.capacity)) % self.capacity
            return self._data[order], self._seq[order], self._ts[order]


@dataclass
class LatencyStats:
    n: int = 0
    mean_ms: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0
    p99_ms: float = 0.0
    max_ms: float = 0.0
    overruns: int = 0
    dropped_frames: int = 0
    idle_ticks: int = 0
    achieved_hz: float = 0.0
    horizon: str = "all inferences"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_durations(cls, seconds, elapsed=None, **kw):
        ms = np.asarray(seconds, dtype=float) * 1e3
        if ms.size == 0:
            return cls(**kw)
        p50, p95, p99 = np.percentile(ms, [50, 95, 99])
        rate = ms.size / elapsed if elapsed else 0.0
        return cls(int(ms.size), float(ms.mean()), float(p50), float(p95), float(p99), float(ms.max()),
                   achieved_hz=float(rate), **kw)

    def to_dict(self):
        return asdict(self)


def bench_latency(model: StModel, trials: int = 1000, warmup: int = 100, seed: int = 0) -> LatencyStats:
    """Single-window inference timings on random inputs drawn around the model's input statistics."""
    rng = np.random.default_rng(seed)
    st = model.stats
    inputs = st.x_mean + st.x_std * rng.standard_normal((warmup + trials, WIN, N_FEATURES))
    for X in inputs[:warmup]:
        predict(model, X)
    durations = np.empty(trials)
    clock = time.perf_counter
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        start = clock()
        for i, X in enumerate(inputs[warmup:]):
            t0 = clock()
            predict(model, X)
            durations[i] = clock() - t0
        elapsed = clock() - start
    finally:
        if was_enabled:
            gc.enable()
    return LatencyStats.from_durations(durations, elapsed, horizon=f"{trials} trials after {warmup} warm-up")


# --- serving --------------------------------------------------------------------------


class _Sink:
    def __init__(self, out, text=False):
        self.out = out
        self.text = text
        self.count = 0

    def emit(self, seq, ts_us, values):
        msg = FrameMessage(int(seq), int(ts_us), tuple(float(v) for v in np.asarray(values, dtype=np.float32)))
        self.out.write(msg.to_csv() + "\n" if self.text else msg.pack())
        self.count += 1


def serve(source, sink, model: StModel, rate: float = DEFAULT_RATE, horizon: int = 25, paced: bool = True,
          text_in: bool = False, text_out: bool = False, ingest_rate: float | None = None) -> LatencyStats:
    """Run the predictor until ``source`` is exhausted.

    ``source`` is a binary/text stream or an iterable of FrameMessages;
    ``sink`` is a writable stream. In paced mode an ingest thread replays
    frames at ``ingest_rate`` (default ``rate``) while the predictor ticks
    at ``rate``; a tick whose inference overruns the period is counted and
    the missed ticks are skipped. Ticks skipped after a late wake-up are
    reported separately as ``late_ticks``. In lockstep mode every frame is pushed and
    predicted in turn (deterministic replay). Each emitted message carries
    the newest input sequence number of its window and the prediction at
    row ``horizon``.
    """
    if not 0 <= horizon < WIN:
        raise ValueError(f"horizon must be in [0, {WIN - 1}]")
    frames = read_frames(source, text_in) if hasattr(source, "read") else source
    out = _Sink(sink, text_out)
    buf = RingBuffer()
    durations = []
    clock = time.perf_counter

    def infer():
        X, seqs, ts = buf.snapshot()
        t0 = clock()
        Y = predict(model, X)
        durations.append(clock() - t0)
        out.emit(seqs[-1], ts[-1], Y[horizon])
        return seqs[-1]

    gc_was = gc.isenabled()
    gc.disable()
    try:
        if not paced:
            start = clock()
            for f in frames:
                if buf.push_frame(f) and len(buf) == buf.capacity:
                    infer()
            return LatencyStats.from_durations(durations, clock() - start, dropped_frames=buf.rejected,
                                               horizon="lockstep replay", extra={"emitted": out.count})
        return _serve_paced(frames, buf, infer, rate, ingest_rate or rate, out, durations)
    finally:
        if gc_was:
            gc.enable()


def _serve_paced(frames, buf, infer, rate, ingest_rate, out, durations):
    clock = time.perf_counter
    done = threading.Event()
    errors = []

    def ingest():
        try:
            t0 = clock()
            for i, f in enumerate(frames):
                wait = t0 + i / ingest_rate - clock()
                if wait > 0:
                    time.sleep(wait)
                buf.push_frame(f)
        except Exception as exc:  # surfaced to the caller after join
            errors.append(exc)
        finally:
            done.set()

    thread = threading.Thread(target=ingest, name="ingest", daemon=True)
    period = 1.0 / rate
    overruns = idle = late = 0
    last_seq = None
    start = clock()
    thread.start()
    k = 0
    while True:
        finished = done.is_set()
        tick_start = clock()
        if len(buf) == buf.capacity and buf.last_seq != last_seq:
            last_seq = infer()
        elif finished:
            break
        else:
            idle += 1
        k += 1
        now = clock()
        deadline = start + k * period
        if now > deadline:
            # skip every tick the slot has run into; never queue a backlog
            missed = int((now - deadline) // period) + 1
            if now - tick_start > period:
                overruns += missed
            else:
                late += missed  # woke late, the work itself fit in a period
            k += missed
            deadline = start + k * period
        time.sleep(max(0.0, deadline - clock()))
    thread.join()
    if errors:
        raise errors[0]
    elapsed = clock() - start
    return LatencyStats.from_durations(durations, elapsed, overruns=overruns, dropped_frames=buf.rejected,
                                       idle_ticks=idle, horizon="paced serve",
                                       extra={"emitted": out.count, "late_ticks": late})


def open_input(spec: str, timeout: float | None = None):
    """``tcp://host:port`` listens for one connection; anything else is a file path."""
    if spec.startswith("tcp://"):
        host, port = spec[6:].rsplit(":", 1)
        srv = socket.create_server((host, int(port)))
        if timeout:
            srv.settimeout(timeout)
        conn, _ = srv.accept()
        srv.close()
        return conn.makefile("rb")
    return open(spec, "rb")


def open_output(spec: str | None):
    if spec in (None, "-"):
        return sys.stdout.buffer
    return open(spec, "wb")


def replay_offline(series, model: StModel, horizon: int = 25):
    """Offline reference for serve: prediction at ``horizon`` for every full window, keyed by newest row index."""
    series = np.asarray(series, dtype=np.float32).astype(float)
    out = {}
    for end in range(WIN - 1, len(series)):
        out[end] = np.asarray(predict(model, series[end - WIN + 1 : end + 1])[horizon], dtype=np.float32)
    return out


def read_outputs(data: bytes | str | Path, text=False):
    if isinstance(data, (str, Path)) and Path(data).exists():
        data = Path(data).read_bytes()
    stream = io.BytesIO(data) if isinstance(data, bytes) else io.StringIO(data)
    return list(read_frames(stream, text))
