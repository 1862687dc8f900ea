import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitdyad import realtime as rt
from gaitdyad import therapist as th


def vals(i):
    return np.full(8, float(i))


def filled(n, cap=50):
    buf = rt.RingBuffer(cap)
    for i in range(1, n + 1):
        buf.push(i, i * 3000, vals(i))
    return buf


# --- wire format -------------------------------------------------------------------


def test_frame_is_48_bytes_and_round_trips():
    f = rt.FrameMessage(7, 21000, tuple(np.arange(8, dtype=np.float32).tolist()))
    data = f.pack()
    assert len(data) == 48 and rt.FRAME_SIZE == 48
    assert rt.FrameMessage.unpack(data) == f
    assert rt.FrameMessage.from_csv(f.to_csv()) == f


def test_truncated_stream_rejected():
    data = rt.FrameMessage(1, 0, (0.0,) * 8).pack()
    with pytest.raises(ValueError, match="truncated"):
        list(rt.read_frames(io.BytesIO(data + data[:10])))


def test_frame_needs_eight_values():
    with pytest.raises(ValueError):
        rt.FrameMessage(1, 0, (0.0,) * 7)


# --- ring buffer ---------------------------------------------------------------------


def test_fifo_at_capacity():
    buf = filled(51)
    X, seqs, _ = buf.snapshot()
    assert len(buf) == 50
    np.testing.assert_array_equal(seqs, np.arange(2, 52))
    np.testing.assert_array_equal(X[:, 0], np.arange(2, 52))


def test_insufficient_data():
    with pytest.raises(rt.InsufficientData, match="insufficient data"):
        filled(10).snapshot()


def test_exactly_fifty_and_sixty():
    np.testing.assert_array_equal(filled(50).snapshot()[1], np.arange(1, 51))
    np.testing.assert_array_equal(filled(60).snapshot()[1], np.arange(11, 61))


def test_out_of_order_rejected():
    buf = rt.RingBuffer()
    buf.push(7, 0, vals(7))
    assert not buf.push(5, 0, vals(5))
    assert not buf.push(7, 0, vals(7))
    assert buf.rejected == 2 and len(buf) == 1


@given(st.lists(st.one_of(st.integers(1, 5), st.just(0)), min_size=1, max_size=400), st.integers(1, 12))
@settings(max_examples=200, deadline=None)
def test_random_interleavings_match_model(ops, cap):
    """Pushes (positive: advance seq by that much, 0: repeat last seq) interleaved with snapshots."""
    buf = rt.RingBuffer(cap)
    buf.push(1, 0, vals(1))
    model = [1]
    seq = 1
    for i, op in enumerate(ops):
        nxt = seq + op
        accepted = buf.push(nxt, 0, vals(nxt))
        if op:
            model.append(nxt)
            seq = nxt
        assert accepted == bool(op)
        if i % 3 == 0:
            if len(model) < cap:
                with pytest.raises(rt.InsufficientData):
                    buf.snapshot()
            else:
                X, seqs, _ = buf.snapshot()
                assert seqs.tolist() == model[-cap:]
                assert X[:, 3].tolist() == [float(s) for s in model[-cap:]]


def test_concurrent_snapshots_are_consistent():
    """A writer thread pushes while the reader snapshots; every snapshot is a contiguous run."""
    buf = rt.RingBuffer(50)
    n = 60_000
    stop = threading.Event()

    def writer():
        for i in range(1, n + 1):
            buf.push(i, i, vals(i))
        stop.set()

    seen = []
    t = threading.Thread(target=writer)
    t.start()
    snaps = 0
    while not stop.is_set() or snaps < 10:
        try:
            X, seqs, _ = buf.snapshot()
        except rt.InsufficientData:
            continue
        snaps += 1
        d = np.diff(seqs)
        assert np.all(d == 1), "torn or reordered snapshot"
        assert np.array_equal(X[:, 0], seqs.astype(float)), "values do not belong to their sequence numbers"
        seen.append(seqs[-1])
    t.join()
    assert np.all(np.diff(seen) >= 0)  # a later snapshot never sees an older state
    assert buf.pushed == n and buf.rejected == 0


# --- stats and serving ---------------------------------------------------------------------


def _model(hidden=8, seed=0):
    rng = np.random.default_rng(seed)
    st_ = th.FeatureStats(rng.normal(size=8), rng.uniform(1, 2, 8), rng.normal(size=8), rng.uniform(1, 2, 8))
    return th.StModel(hidden=hidden, seed=seed, stats=st_)


def test_latency_stats_monotone():
    s = rt.bench_latency(_model(hidden=1), trials=200, warmup=10)
    assert s.n == 200
    assert 0 <= s.p50_ms <= s.p95_ms <= s.p99_ms <= s.max_ms
    assert s.p99_ms < 1.0


def _series(n=300, seed=1):
    t = np.arange(n) / 333.0
    rng = np.random.default_rng(seed)
    return np.column_stack([10 * np.sin(2 * np.pi * 0.9 * t + p) for p in rng.uniform(0, 6, 8)])


@pytest.mark.parametrize("horizon", [25, 49])
def test_lockstep_replay_matches_offline_bitwise(horizon):
    m = _model()
    series = _series()
    frames = rt.frames_from_series(series)
    out = io.BytesIO()
    stats = rt.serve(iter(frames), out, m, horizon=horizon, paced=False)
    msgs = rt.read_outputs(out.getvalue())
    ref = rt.replay_offline(series, m, horizon)
    assert stats.extra["emitted"] == len(msgs) == len(series) - 49
    for msg in msgs:
        expected = ref[msg.seq - 1]
        assert np.array(msg.values, dtype=np.float32).tobytes() == expected.tobytes()


def test_paced_replay_matches_offline_bitwise():
    m = _model()
    series = _series(200)
    out = io.BytesIO()
    stats = rt.serve(iter(rt.frames_from_series(series)), out, m, horizon=25, ingest_rate=2000.0, rate=2000.0)
    msgs = rt.read_outputs(out.getvalue())
    ref = rt.replay_offline(series, m, 25)
    assert msgs and stats.n == len(msgs)
    assert len({msg.seq for msg in msgs}) == len(msgs)
    for msg in msgs:
        assert np.array(msg.values, dtype=np.float32).tobytes() == ref[msg.seq - 1].tobytes()


def test_file_input_text_and_binary(tmp_path):
    m = _model()
    series = _series(120)
    frames = rt.frames_from_series(series)
    rt.write_frames(tmp_path / "in.bin", frames)
    rt.write_frames(tmp_path / "in.csv", frames, text=True)
    outs = []
    for name, text in (("in.bin", False), ("in.csv", True)):
        buf = io.BytesIO()
        with open(tmp_path / name, "rb") as fh:
            rt.serve(fh, buf, m, paced=False, text_in=text)
        outs.append(buf.getvalue())
    assert outs[0] == outs[1] and len(outs[0]) == 48 * 71


def test_horizon_validated():
    with pytest.raises(ValueError):
        rt.serve(iter([]), io.BytesIO(), _model(), horizon=50)


def test_out_of_order_frames_counted():
    m = _model()
    frames = rt.frames_from_series(_series(80))
    frames.insert(60, frames[10])
    stats = rt.serve(iter(frames), io.BytesIO(), m, paced=False)
    assert stats.dropped_frames == 1 and stats.extra["emitted"] == 31
