"""Synthetic therapist: eight per-feature LSTM heads from patient to therapist kinematics.

Inputs are 50-frame windows of patient (q, qdot); targets are the therapist's
(q, qdot) over a window shifted 25 frames later, so row 25 is "now" and row 49
looks 75 ms ahead at 333 Hz.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import serialize
from .synth import MIRROR, DyadRecording

log = logging.getLogger(__name__)

N_FEATURES = 8
FEATURES = ("q1", "q2", "q3", "q4", "qd1", "qd2", "qd3", "qd4")
POSITION = slice(0, 4)
VELOCITY = slice(4, 8)
WIN, STEP, SHIFT = 50, 10, 25
HORIZON_NOW, HORIZON_AHEAD = 25, 49
MIRROR_FEATURES = np.array(list(MIRROR) + [4 + m for m in MIRROR])


def dyad_features(rec: DyadRecording):
    """Aligned (N, 8) patient and therapist feature series."""
    return (np.hstack([rec.patient.q, rec.patient.qdot]), np.hstack([rec.therapist.q, rec.therapist.qdot]))


@dataclass
class Windows:
    X: np.ndarray  # (n, win, 8) patient
    Y: np.ndarray  # (n, win, 8) therapist, shifted
    dyad_id: np.ndarray  # (n,)
    t: np.ndarray  # (n,) start frame of X

    def __len__(self):
        return len(self.X)

    @classmethod
    def empty(cls, win=WIN):
        return cls(np.zeros((0, win, N_FEATURES)), np.zeros((0, win, N_FEATURES)), np.zeros(0, int), np.zeros(0, int))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("X", "Y", "dyad_id", "t")))

    def select(self, idx):
        return Windows(self.X[idx], self.Y[idx], self.dyad_id[idx], self.t[idx])


def window_count(n: int, win: int = WIN, step: int = STEP, shift: int = SHIFT) -> int:
    return max(0, (n - win - shift) // step + 1)


def build_windows(patient, therapist, win=WIN, step=STEP, shift=SHIFT, dyad_id=0, offset=0) -> Windows:
    """Sliding windows over one contiguous session; ``offset`` is the session's first frame index."""
    patient = np.asarray(patient, dtype=float)
    therapist = np.asarray(therapist, dtype=float)
    if patient.shape != therapist.shape:
        raise ValueError("patient and therapist series must be aligned")
    n = window_count(len(patient), win, step, shift)
    if n == 0:
        log.warning("series of %d frames is too short for win=%d shift=%d", len(patient), win, shift)
        return Windows.empty(win)
    starts = np.arange(n) * step
    idx = starts[:, None] + np.arange(win)
    return Windows(patient[idx], therapist[idx + shift], np.full(n, dyad_id), starts + offset)


def split_dyad(rec: DyadRecording, ratios=(0.7, 0.2, 0.1), **kw):
    """Contiguous-in-time train/val/test windows for one dyad; windows never cross a partition."""
    P, T = dyad_features(rec)
    n = len(P)
    bounds = np.concatenate([[0], np.cumsum(np.floor(np.asarray(ratios) * n).astype(int))])
    bounds[-1] = n
    return [build_windows(P[a:b], T[a:b], dyad_id=rec.dyad_id, offset=a, **kw) for a, b in zip(bounds[:-1], bounds[1:])]


def all_windows(rec: DyadRecording, **kw) -> Windows:
    P, T = dyad_features(rec)
    return build_windows(P, T, dyad_id=rec.dyad_id, **kw)


# --- model -----------------------------------------------------------------------------


@dataclass
class StConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-5
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.hidden) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size, hidden and lr must be positive")


@dataclass
class FeatureStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, windows: Windows, floor=1e-6):
        X = windows.X.reshape(-1, N_FEATURES)
        Y = windows.Y.reshape(-1, N_FEATURES)
        return cls(X.mean(0), np.maximum(X.std(0), floor), Y.mean(0), np.maximum(Y.std(0), floor))

    def to_dict(self):
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def _init_head(seed, feature, hidden):
    rng = np.random.default_rng([seed, feature])
    p = nn.init_lstm_params(rng, N_FEATURES, hidden)
    bound = 1.0 / np.sqrt(hidden)
    p["Wr"] = rng.uniform(-bound, bound, (hidden, 1))
    p["br"] = np.zeros(1)
    return p


class StModel:
    """Independent heads evaluated side by side on a leading group axis."""

    def __init__(self, features=tuple(range(N_FEATURES)), hidden: int = 64, seed: int = 0, stats: FeatureStats | None = None):
        self.features = tuple(int(f) for f in features)
        self.hidden = hidden
        self.stats = stats
        heads = [_init_head(seed, f, hidden) for f in self.features]
        self.params = {k: np.stack([h[k] for h in heads]) for k in heads[0]}

    @property
    def n_heads(self):
        return len(self.features)

    def head_params(self, i):
        return {k: v[i].copy() for k, v in self.params.items()}

    def set_head(self, i, params):
        for k, v in params.items():
            self.params[k][i] = v
        self._kernel_cache = None

    def forward_normalized(self, Xn):
        """(B, T, 8) normalised input -> (G, B, T) normalised outputs and a cache."""
        lstm_p = {k: self.params[k] for k in ("Wx", "Wh", "b")}
        hs, cache = nn.lstm_forward(lstm_p, Xn)
        y = (hs @ self.params["Wr"][:, None])[..., 0] + self.params["br"][:, None]
        return y, (hs, cache)

    def backward(self, cache, dy):
        hs, lstm_cache = cache
        lstm_p = {k: self.params[k] for k in ("Wx", "Wh", "b")}
        grads = {
            "Wr": np.einsum("gbth,gbt->gh", hs, dy)[..., None],
            "br": dy.sum(axis=(1, 2))[:, None],
        }
        dhs = dy[..., None] * self.params["Wr"][:, None, None, :, 0]
        _, g = nn.lstm_backward(lstm_p, lstm_cache, dhs)
        grads.update({k: g[k] for k in ("Wx", "Wh", "b")})
        return grads

    def normalize_x(self, X):
        return (X - self.stats.x_mean) / self.stats.x_std

    def normalize_y(self, Y):
        s = self.stats
        f = list(self.features)
        return (Y[..., f] - s.y_mean[f]) / s.y_std[f]


def loss_and_grads(model: StModel, Xn, Yn):
    """Sum over heads of each head's window MSE; ``Yn`` is (B, T, G) in normalised units."""
    y, cache = model.forward_normalized(Xn)
    target = np.moveaxis(Yn, -1, 0)
    err = y - target
    per_head = np.mean(err**2, axis=(1, 2))
    dy = 2.0 * err / (err.shape[1] * err.shape[2])
    return per_head, model.backward(cache, dy)


class InferenceKernel:
    """Lean float32 forward pass used by :func:`predict` and the real-time server.

    Gates are reordered to (i, f, o, g) and the sigmoid rows pre-scaled by 1/2
    so that one tanh evaluates every gate: sigmoid(x) = (1 + tanh(x / 2)) / 2.
    """

    dtype = np.float32

    def __init__(self, model: StModel):
        H = model.hidden
        order = np.r_[0 : 2 * H, 3 * H : 4 * H, 2 * H : 3 * H]
        scale = np.ones(4 * H)
        scale[: 3 * H] = 0.5
        p = model.params
        self.H = H

        def gate_major(w):  # (G, ..., 4H) -> (4, G, ..., H)
            w = (w[..., order] * scale).astype(self.dtype)
            return np.ascontiguousarray(np.moveaxis(w.reshape(w.shape[:-1] + (4, H)), -2, 0))

        self.Wx = gate_major(p["Wx"])  # (4, G, d, H)
        self.Wh = gate_major(p["Wh"])  # (4, G, H, H)
        self.b = gate_major(p["b"])  # (4, G, H)
        self.Wr = p["Wr"].astype(self.dtype)
        self.br = p["br"].astype(self.dtype)
        st = model.stats
        f = list(model.features)
        self.x_mean, self.x_std = st.x_mean, st.x_std
        self.y_mean, self.y_std = st.y_mean[f], st.y_std[f]

    def __call__(self, X):
        """(B, T, 8) raw patient windows -> (B, T, G) raw therapist predictions."""
        H = self.H
        Xn = ((X - self.x_mean) / self.x_std).astype(self.dtype)
        B, T, _ = Xn.shape
        G = self.Wx.shape[1]
        xp = np.matmul(Xn, self.Wx[:, :, None])  # (4, G, B, T, H)
        xp += self.b[:, :, None, None]
        xp = np.ascontiguousarray(np.moveaxis(xp, 3, 0))  # (T, 4, G, B, H)
        z = np.empty((4, G, B, H), self.dtype)  # gate-major keeps every gate block contiguous
        c = np.zeros((G, B, H), self.dtype)
        tmp = np.empty_like(c)
        hs = np.zeros((T + 1, G, B, H), self.dtype)  # hs[0] is the initial state
        # views are built once; the loop only calls ufuncs
        sig, zi, zf, zo, zg = z[:3], z[0], z[1], z[2], z[3]
        Wh, mul, add, tanh, matmul = self.Wh, np.multiply, np.add, np.tanh, np.matmul
        for t in range(T):
            matmul(hs[t], Wh, out=z)
            add(z, xp[t], out=z)
            tanh(z, out=z)
            mul(sig, 0.5, out=sig)
            add(sig, 0.5, out=sig)
            mul(c, zf, out=c)
            mul(zi, zg, out=tmp)
            add(c, tmp, out=c)
            h = hs[t + 1]
            tanh(c, out=h)
            mul(h, zo, out=h)
        hs = hs[1:]
        y = (np.moveaxis(hs, 0, 2) @ self.Wr[:, None])[..., 0] + self.br[:, None]  # (G, B, T)
        return np.moveaxis(y, 0, -1).astype(float) * self.y_std + self.y_mean


def _kernel(model: StModel) -> InferenceKernel:
    key = tuple(id(v) for v in model.params.values())
    cached = getattr(model, "_kernel_cache", None)
    if cached is None or cached[0] != key:
        cached = (key, InferenceKernel(model))
        model._kernel_cache = cached
    return cached[1]


def predict(model: StModel, X) -> np.ndarray:
    """Therapist window (raw units) for patient window(s) ``X`` (50, 8) or (B, 50, 8), also raw."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    Xb = X[None] if single else X
    if Xb.ndim != 3 or Xb.shape[-1] != N_FEATURES:
        raise nn.ShapeError(f"expected (T, {N_FEATURES}) patient windows, got {X.shape}")
    out = _kernel(model)(Xb)
    return out[0] if single else out


@dataclass
class TrainHistory:
    val_rmse: np.ndarray  # (epochs, heads), normalised units
    best_epoch: np.ndarray  # (heads,)


def _val_rmse(model, Xn, Yn, batch=1024):
    sq = np.zeros(model.n_heads)
    for i in range(0, len(Xn), batch):
        y, _ = model.forward_normalized(Xn[i : i + batch])
        sq += np.sum((y - np.moveaxis(Yn[i : i + batch], -1, 0)) ** 2, axis=(1, 2))
    return np.sqrt(sq / (len(Xn) * Xn.shape[1]))


def train_heads(train: Windows, val: Windows, config: StConfig, features=tuple(range(N_FEATURES))):
    """Train one head per feature; each keeps the weights of its own best validation epoch.

    Heads share nothing but the batch order, which depends only on the seed,
    so a head trained alone matches the same head trained with the others.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation windows must be non-empty")
    stats = FeatureStats.fit(train)
    model = StModel(features, config.hidden, config.seed, stats)
    Xn, Yn = model.normalize_x(train.X), model.normalize_y(train.Y)
    Xv, Yv = model.normalize_x(val.X), model.normalize_y(val.Y)
    rng = np.random.default_rng(config.seed)
    opt = nn.AdamState(lr=config.lr)
    best = np.full(model.n_heads, np.inf)
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = np.zeros(model.n_heads, int)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(Xn))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(model, Xn[idx], Yn[idx])
            if not np.all(np.isfinite(loss)):
                bad = [model.features[i] for i in np.flatnonzero(~np.isfinite(loss))]
                raise nn.NonFiniteError(f"non-finite loss for features {bad} at epoch {epoch}, batch {bi}")
            model.params = nn.adam_step(opt, model.params, grads)
        rmse = _val_rmse(model, Xv, Yv)
        history.append(rmse)
        log.info("epoch %d val rmse %s", epoch, np.array2string(rmse, precision=4))
        improved = rmse < best
        best = np.where(improved, rmse, best)
        best_epoch[improved] = epoch
        for k, v in model.params.items():
            best_params[k][improved] = v[improved]
    model.params = best_params
    return model, TrainHistory(np.array(history), best_epoch)


def train_feature_model(train: Windows, val: Windows, feature_idx: int, config: StConfig):
    """A single head for one therapist feature."""
    return train_heads(train, val, config, (feature_idx,))


def combine(heads) -> StModel:
    """Merge single-feature models into one model with heads in feature order."""
    heads = sorted(heads, key=lambda m: m.features)
    out = StModel(tuple(f for m in heads for f in m.features), heads[0].hidden, stats=heads[0].stats)
    for i, m in enumerate(heads):
        out.set_head(i, m.head_params(0))
    return out


# --- evaluation ------------------------------------------------------------------------


def window_rmse(Y_hat, Y):
    """Per-window, per-feature rMSE over the time axis: (n, 8)."""
    return np.sqrt(np.mean((np.asarray(Y_hat) - np.asarray(Y)) ** 2, axis=-2))


def summarize_rmse(per_window):
    pos = per_window[:, POSITION].mean(axis=1)
    vel = per_window[:, VELOCITY].mean(axis=1)
    return {
        "position_mean": float(pos.mean()),
        "position_std": float(pos.std()),
        "velocity_mean": float(vel.mean()),
        "velocity_std": float(vel.std()),
        "per_feature": per_window.mean(axis=0).tolist(),
        "n_windows": int(len(per_window)),
    }


def evaluate_rmse(model: StModel, windows: Windows, batch: int = 1024):
    preds = np.concatenate([predict(model, windows.X[i : i + batch]) for i in range(0, len(windows), batch)])
    return summarize_rmse(window_rmse(preds, windows.Y))


def patient_copy(X):
    """Baseline: the mirrored patient joints, row for row."""
    return np.asarray(X)[..., MIRROR_FEATURES]


def zero_order_hold(therapist_series, windows: Windows, win=WIN):
    """Offline baseline: hold the therapist's value at each window's current frame (last X row).

    ``windows.t`` must index into ``therapist_series``.
    """
    last = np.asarray(therapist_series)[windows.t + win - 1]
    return np.repeat(last[:, None], win, axis=1)


# --- leave-one-out -----------------------------------------------------------------------


@dataclass
class LooRow:
    label: str
    held_out: int | None
    position_mean: float
    position_std: float
    velocity_mean: float
    velocity_std: float
    copy_position_mean: float
    n_windows: int


def _row(label, held_out, model, windows):
    ev = evaluate_rmse(model, windows)
    base = summarize_rmse(window_rmse(patient_copy(windows.X), windows.Y))
    return LooRow(label, held_out, ev["position_mean"], ev["position_std"], ev["velocity_mean"], ev["velocity_std"],
                  base["position_mean"], ev["n_windows"])


def pooled_run(recordings, config: StConfig):
    """Train on every dyad's 70% / validate on 20%; score on each dyad's last 10%."""
    parts = [split_dyad(r) for r in recordings]
    train = Windows.concat([p[0] for p in parts])
    val = Windows.concat([p[1] for p in parts])
    test = Windows.concat([p[2] for p in parts])
    model, hist = train_heads(train, val, config)
    return model, hist, test


def leave_one_out(recordings, config: StConfig, progress=None):
    """One run per held-out dyad (trained on the others' 70/20 partitions) plus the pooled run."""
    if len(recordings) < 2:
        raise ValueError("leave-one-out needs at least two dyads")
    rows = []
    models = {}
    for rec in recordings:
        others = [r for r in recordings if r.dyad_id != rec.dyad_id]
        parts = [split_dyad(r) for r in others]
        model, _ = train_heads(Windows.concat([p[0] for p in parts]), Windows.concat([p[1] for p in parts]), config)
        rows.append(_row(f"PT{rec.dyad_id}", rec.dyad_id, model, all_windows(rec)))
        models[rec.dyad_id] = model
        if progress:
            progress(rows[-1])
    model, _, test = pooled_run(recordings, config)
    rows.append(_row("pooled", None, model, test))
    models[None] = model
    return rows, models


def write_loo(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dyad", "position_rmse_mean", "position_rmse_std", "velocity_rmse_mean", "velocity_rmse_std",
                    "patient_copy_position_rmse", "n_windows"])
        for r in rows:
            w.writerow([r.label, f"{r.position_mean:.6f}", f"{r.position_std:.6f}", f"{r.velocity_mean:.6f}",
                        f"{r.velocity_std:.6f}", f"{r.copy_position_mean:.6f}", r.n_windows])


# --- persistence -----------------------------------------------------------------------


def save_model(directory, model: StModel, config: StConfig | None = None, extra: dict | None = None):
    """One DYFW file per head plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, f in enumerate(model.features):
        p = model.head_params(i)
        lstm = nn.LSTM(N_FEATURES, model.hidden)
        lstm.params.update({k: p[k] for k in ("Wx", "Wh", "b")})
        readout = nn.Dense(model.hidden, 1)
        readout.params.update({"W": p["Wr"], "b": p["br"]})
        name = f"head_{FEATURES[f]}.dyfw"
        serialize.save(directory / name, [("lstm", lstm), ("readout", readout)], {"feature": FEATURES[f]})
        files.append(name)
    manifest = {
        "model": "synthetic-therapist",
        "features": [FEATURES[f] for f in model.features],
        "head_files": files,
        "hidden": model.hidden,
        "stats": model.stats.to_dict(),
        "window": {"length": WIN, "step": STEP, "shift": SHIFT, "row_now": HORIZON_NOW, "row_ahead": HORIZON_AHEAD},
        "train_config": asdict(config) if config else None,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_model(directory) -> StModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    features = tuple(FEATURES.index(f) for f in manifest["features"])
    model = StModel(features, manifest["hidden"], stats=FeatureStats.from_dict(manifest["stats"]))
    for i, name in enumerate(manifest["head_files"]):
        layers, _ = serialize.load(directory / name)
        named = dict(layers)
        lstm, readout = named["lstm"], named["readout"]
        if lstm.hidden_size != model.hidden:
            raise serialize.FormatError(f"{name}: hidden size {lstm.hidden_size} != {model.hidden}")
        model.set_head(i, {**lstm.params, "Wr": readout.params["W"], "br": readout.params["b"]})
    return model
