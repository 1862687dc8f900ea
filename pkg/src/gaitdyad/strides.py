"""Stride segmentation at patient heel strikes, outlier screening, z-scoring and splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import MIRROR, SIDES, DyadRecording

log = logging.getLogger(__name__)

N_SAMPLES = 100
JOINT_NAMES = ("hip", "knee")
SIDE_COLUMNS = {"left": (0, 1), "right": (2, 3)}
MIRROR_SIDE = {"left": "right", "right": "left"}
STD_FLOOR = 1e-6


class InsufficientStridesError(ValueError):
    pass


@dataclass
class Stride:
    hip: np.ndarray
    knee: np.ndarray
    owner: str
    side: str
    dyad_id: int
    stride_index: int
    k_p: tuple = (0.0, 0.0)  # (hip, knee) stiffness of the patient-side element
    k_t: tuple = (0.0, 0.0)
    start: int = -1
    end: int = -1

    def __post_init__(self):
        self.hip = np.asarray(self.hip, dtype=float)
        self.knee = np.asarray(self.knee, dtype=float)
        if self.hip.shape != (N_SAMPLES,) or self.knee.shape != (N_SAMPLES,):
            raise ValueError(f"stride needs {N_SAMPLES} samples per joint")

    @property
    def values(self):
        """(2, 100) hip and knee curves."""
        return np.stack([self.hip, self.knee])

    @property
    def key(self):
        return (self.dyad_id, self.stride_index, self.side if self.owner == "patient" else MIRROR_SIDE[self.side])


@dataclass
class StridePair:
    patient: Stride
    therapist: Stride

    def __post_init__(self):
        p, t = self.patient, self.therapist
        if p.dyad_id != t.dyad_id or MIRROR_SIDE[p.side] != t.side or p.stride_index != t.stride_index:
            raise ValueError("stride pair must share dyad and interval on mirrored sides")


def stack(strides) -> np.ndarray:
    """(n, 2, 100) array from a list of strides."""
    if not strides:
        return np.empty((0, 2, N_SAMPLES))
    return np.stack([s.values for s in strides])


def detect_heel_strikes(contact, refractory: int = 2) -> np.ndarray:
    """Rising edges (false -> true) of a contact series.

    An edge within ``refractory`` frames of the previously accepted one is
    treated as contact bounce and ignored.
    """
    c = np.asarray(contact, dtype=bool)
    edges = np.flatnonzero(c[1:] & ~c[:-1]) + 1
    kept = []
    for e in edges:
        if not kept or e - kept[-1] > refractory:
            kept.append(int(e))
    if len(kept) < 2:
        raise InsufficientStridesError(f"insufficient strides: {len(kept)} heel strike(s) found")
    return np.asarray(kept, dtype=int)


def resample(segment, n: int = N_SAMPLES) -> np.ndarray:
    """Linearly resample ``segment`` (L, ...) to ``n`` samples spanning its first to last frame."""
    segment = np.asarray(segment, dtype=float)
    L = segment.shape[0]
    pos = np.linspace(0.0, L - 1, n)
    src = np.arange(L)
    flat = segment.reshape(L, -1)
    out = np.column_stack([np.interp(pos, src, flat[:, j]) for j in range(flat.shape[1])])
    return out.reshape((n,) + segment.shape[1:])


def segment_and_resample(
    q,
    strikes,
    side: str,
    owner: str = "patient",
    dyad_id: int = 0,
    rate: float = 333.0,
    k_p=(0.0, 0.0),
    k_t=(0.0, 0.0),
    min_duration: float = 0.3,
    max_duration: float = 3.0,
):
    """Cut ``q`` (N, 4) between consecutive strikes and resample each piece.

    ``side`` selects the hip/knee columns; for therapist strides pass the leg
    mirrored to the patient leg whose strikes are given. Returns the strides and
    the number discarded for implausible duration.
    """
    if len(strikes) < 2:
        raise InsufficientStridesError("insufficient strides: need at least 2 heel strikes")
    cols = list(SIDE_COLUMNS[side])
    q = np.asarray(q, dtype=float)
    out = []
    discarded = 0
    for i in range(len(strikes) - 1):
        a, b = int(strikes[i]), int(strikes[i + 1])
        dur = (b - a) / rate
        if dur < min_duration or dur > max_duration or b > q.shape[0]:
            discarded += 1
            continue
        seg = resample(q[a:b, cols])
        out.append(Stride(seg[:, 0], seg[:, 1], owner, side, dyad_id, i, tuple(k_p), tuple(k_t), a, b))
    return out, discarded


def extract_strides(rec: DyadRecording, min_duration=0.3, max_duration=3.0):
    """Patient and mirrored therapist strides for both legs of one recording."""
    patient, therapist = [], []
    discarded = 0
    refractory = int(min_duration * rec.rate)
    for s, side in enumerate(SIDES):
        strikes = detect_heel_strikes(rec.patient.contact[:, s], refractory=refractory)
        cols = SIDE_COLUMNS[side]
        k_p = tuple(float(rec.params.k_p[c]) for c in cols)
        k_t = tuple(float(rec.params.k_t[MIRROR[c]]) for c in cols)
        common = dict(dyad_id=rec.dyad_id, rate=rec.rate, k_p=k_p, k_t=k_t,
                      min_duration=min_duration, max_duration=max_duration)
        ps, dp = segment_and_resample(rec.patient.q, strikes, side, "patient", **common)
        ts, dt = segment_and_resample(rec.therapist.q, strikes, MIRROR_SIDE[side], "therapist", **common)
        patient += ps
        therapist += ts
        discarded += dp + dt
    return patient, therapist, discarded


def stride_distances(strides) -> np.ndarray:
    """RMS deviation of each stride from the mean stride, hip and knee pooled."""
    X = stack(strides).reshape(len(strides), -1)
    return np.sqrt(np.mean((X - X.mean(axis=0)) ** 2, axis=1))


def remove_outliers(strides, percentile: float = 90.0):
    """Drop strides whose distance to the mean stride exceeds the given percentile."""
    if len(strides) < 10:
        raise ValueError(f"outlier screening needs at least 10 strides, got {len(strides)}")
    d = stride_distances(strides)
    cut = np.percentile(d, percentile)
    # ties with the cut value are kept
    keep = d <= cut + 1e-12 * max(cut, 1.0)
    kept = [s for s, k in zip(strides, keep) if k]
    removed = [s for s, k in zip(strides, keep) if not k]
    return kept, removed


def pair_strides(patient, therapist):
    """Match strides cut from the same patient interval; unmatched strides are dropped."""
    by_key = {s.key: s for s in therapist}
    return [StridePair(p, by_key[p.key]) for p in patient if p.key in by_key]


@dataclass
class StrideDataset:
    pairs: list
    discarded_duration: int = 0
    removed_outliers: int = 0
    meta: dict = field(default_factory=dict)

    def strides(self):
        out = []
        for pr in self.pairs:
            out += [pr.patient, pr.therapist]
        return out

    def joint_array(self, joint: int, owner: str | None = None):
        sel = [s for s in self.strides() if owner is None or s.owner == owner]
        return stack(sel)[:, joint] if sel else np.empty((0, N_SAMPLES))


def build_stride_dataset(recordings, percentile=90.0, min_duration=0.3, max_duration=3.0):
    """Segment, screen and pair strides for a list of recordings.

    Outliers are screened within each (dyad, owner, leg) group so that a
    patient's characteristic gait is not judged against other patients. A
    removed stride also removes its partner.
    """
    patient, therapist = [], []
    discarded = 0
    removed = 0
    for rec in recordings:
        ps, ts, d = extract_strides(rec, min_duration, max_duration)
        discarded += d
        for group_src, group_dst in ((ps, patient), (ts, therapist)):
            for side in SIDES:
                grp = [s for s in group_src if s.side == side]
                if len(grp) >= 10:
                    kept, rem = remove_outliers(grp, percentile)
                    removed += len(rem)
                else:
                    kept = grp
                group_dst.extend(kept)
    pairs = pair_strides(patient, therapist)
    meta = {
        "outlier_metric": "rms_deviation_from_mean_stride",
        "outlier_percentile": percentile,
        "outlier_grouping": "dyad,owner,side",
        "resampling": "linear",
        "n_samples": N_SAMPLES,
    }
    return StrideDataset(pairs, discarded, removed, meta)


# --- normalisation -------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # (2, 100)
    std: np.ndarray  # (2, 100)
    floored: int = 0

    def joint(self, j: int) -> "NormStats":
        return NormStats(self.mean[j : j + 1], self.std[j : j + 1], self.floored)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "floored": self.floored}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float), int(d.get("floored", 0)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_stats(train, pooled_std: bool = False) -> NormStats:
    """Per-sample-index mean and std over training curves ``(n, J, 100)``.

    With ``pooled_std`` each joint gets one std (RMS over sample indices),
    broadcast along the curve; dividing by an index-varying std injects
    offsets and sharp features a low-order Fourier decoder cannot follow.
    """
    X = np.asarray(train, dtype=float)
    if X.ndim == 2:
        X = X[:, None, :]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    if pooled_std:
        std = np.broadcast_to(np.sqrt(np.mean(std**2, axis=1, keepdims=True)), std.shape).copy()
    low = std < STD_FLOOR
    n_floor = int(low.sum())
    if n_floor:
        log.warning("std floor applied at %d sample indices", n_floor)
    return NormStats(mean, np.where(low, STD_FLOOR, std), n_floor)


def _shape_like(X, stats):
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and stats.mean.shape[0] == 1:
        return X, stats.mean[0], stats.std[0]
    return X, stats.mean, stats.std


def normalize(X, stats: NormStats):
    X, m, s = _shape_like(X, stats)
    return (X - m) / s


def denormalize(X, stats: NormStats):
    X, m, s = _shape_like(X, stats)
    return X * s + m


# --- splits ----------------------------------------------------------------------


def partition_sizes(n: int, ratios):
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    raw = ratios * n
    sizes = np.floor(raw + 1e-9).astype(int)
    rem = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    if np.any(sizes == 0):
        raise ValueError(f"split of {n} items by {ratios.tolist()} leaves an empty partition")
    return sizes


def split(n_items: int, ratios, seed=0, contiguous: bool = False):
    """Index partitions of ``range(n_items)``.

    ``contiguous`` keeps time order (first block train, then validation, ...);
    otherwise indices are shuffled with ``seed`` first.
    """
    sizes = partition_sizes(n_items, ratios)
    idx = np.arange(n_items) if contiguous else np.random.default_rng(seed).permutation(n_items)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(idx[bounds[i] : bounds[i + 1]]) for i in range(len(sizes))]


# --- persistence -------------------------------------------------------------------


def _header():
    return (
        ["owner", "side", "dyad_id", "stride_index", "k_p_hip", "k_p_knee", "k_t_hip", "k_t_knee", "start", "end"]
        + [f"hip{i}" for i in range(N_SAMPLES)]
        + [f"knee{i}" for i in range(N_SAMPLES)]
    )


def write_strides(path, strides):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header())
        for s in strides:
            w.writerow(
                [s.owner, s.side, s.dyad_id, s.stride_index, *map(repr, map(float, s.k_p)), *map(repr, map(float, s.k_t)), s.start, s.end]
                + [repr(float(v)) for v in s.hip]
                + [repr(float(v)) for v in s.knee]
            )


def read_strides(path):
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != _header():
            raise ValueError(f"{path}: not a stride CSV")
        for r in reader:
            vals = np.asarray(r[10:], dtype=float)
            out.append(
                Stride(
                    vals[:N_SAMPLES], vals[N_SAMPLES:], r[0], r[1], int(r[2]), int(r[3]),
                    (float(r[4]), float(r[5])), (float(r[6]), float(r[7])), int(r[8]), int(r[9]),
                )
            )
    return out
