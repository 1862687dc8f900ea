"""LSTM cell and unrolled sequence pass with backpropagation through time.

Parameters use a fused gate layout ``[i, f, g, o]`` along the last axis:

    Wx: (d, 4H)    Wh: (H, 4H)    b: (4H,)

Any number of leading *group* axes may be prepended to all three arrays
(e.g. ``Wx: (G, d, 4H)``) to run G independent cells side by side on the same
input. Groups never exchange values; stacking is only a throughput device.
"""

from __future__ import annotations

import numpy as np

from .layers import DTYPE, Layer, MissingCacheError, ShapeError, sigmoid


def init_lstm_params(rng, input_size, hidden_size, groups=None):
    lead = () if groups is None else (groups,)
    limit = 1.0 / np.sqrt(hidden_size)
    return {
        "Wx": rng.uniform(-limit, limit, size=lead + (input_size, 4 * hidden_size)).astype(DTYPE),
        "Wh": rng.uniform(-limit, limit, size=lead + (hidden_size, 4 * hidden_size)).astype(DTYPE),
        "b": np.zeros(lead + (4 * hidden_size,), dtype=DTYPE),
    }


def _bias(b):
    return b if b.ndim == 1 else b[..., None, :]


def _hidden(params):
    return params["Wh"].shape[-2]


def _split(z, H):
    return z[..., :H], z[..., H : 2 * H], z[..., 2 * H : 3 * H], z[..., 3 * H :]


def _check_shapes(params, x, h_prev, c_prev):
    d = params["Wx"].shape[-2]
    H = _hidden(params)
    if x.shape[-1] != d:
        raise ShapeError(f"lstm-cell(d={d}, H={H}): input feature size {x.shape[-1]} != {d}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(f"lstm-cell(d={d}, H={H}): state sizes {h_prev.shape}, {c_prev.shape}")


def lstm_step(params, x, h_prev, c_prev):
    """One LSTM update. Returns ``(h, c, cache)``."""
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    _check_shapes(params, x, h_prev, c_prev)
    H = _hidden(params)
    z = x @ params["Wx"] + h_prev @ params["Wh"] + _bias(params["b"])
    zi, zf, zg, zo = _split(z, H)
    i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
    g = np.tanh(zg)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def _gate_grads(dh, dc, c_prev, i, f, g, o, tc):
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return dz, dc * f


def _sum_to(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def lstm_step_backward(params, cache, dh, dc):
    """Backward of :func:`lstm_step`.

    Returns ``(dx, dh_prev, dc_prev, grads)`` for upstream gradients on the
    new hidden and cell states.
    """
    if cache is None:
        raise MissingCacheError("lstm-cell: backward needs the cache returned by lstm_step")
    x, h_prev, c_prev, i, f, g, o, tc = cache
    dz, dc_prev = _gate_grads(dh, dc, c_prev, i, f, g, o, tc)
    grads = {
        "Wx": _sum_to(np.swapaxes(x, -1, -2) @ dz, params["Wx"].shape),
        "Wh": np.swapaxes(h_prev, -1, -2) @ dz,
        "b": dz.sum(axis=-2),
    }
    dx = _sum_to(dz @ np.swapaxes(params["Wx"], -1, -2), x.shape)
    dh_prev = dz @ np.swapaxes(params["Wh"], -1, -2)
    return dx, dh_prev, dc_prev, grads


def lstm_forward(params, X, h0=None, c0=None):
    """Unroll over a batch of sequences ``X: (B, T, d)``.

    Returns hidden states ``(..., B, T, H)`` (group axes first) and a cache.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 3:
        raise ShapeError(f"lstm: expected (B, T, d) input, got {X.shape}")
    Wx, Wh = params["Wx"], params["Wh"]
    if X.shape[-1] != Wx.shape[-2]:
        raise ShapeError(f"lstm(d={Wx.shape[-2]}): input feature size {X.shape[-1]}")
    H = _hidden(params)
    lead = Wx.shape[:-2]
    B, T, _ = X.shape
    # (..., B, T, 4H)
    xproj = np.matmul(X, Wx[..., None, :, :]) + _bias(params["b"])[..., None, :]
    state_shape = lead + (B, H)
    h = np.zeros(state_shape, dtype=DTYPE) if h0 is None else np.asarray(h0, dtype=DTYPE)
    c = np.zeros(state_shape, dtype=DTYPE) if c0 is None else np.asarray(c0, dtype=DTYPE)

    hs = np.empty((T,) + state_shape, dtype=DTYPE)
    cs = np.empty((T + 1,) + state_shape, dtype=DTYPE)
    acts = np.empty((T,) + lead + (B, 4 * H), dtype=DTYPE)
    tcs = np.empty((T,) + state_shape, dtype=DTYPE)
    h_init = h
    cs[0] = c
    for t in range(T):
        z = xproj[..., t, :] + h @ Wh
        a = acts[t]
        a[..., : 2 * H] = sigmoid(z[..., : 2 * H])
        a[..., 2 * H : 3 * H] = np.tanh(z[..., 2 * H : 3 * H])
        a[..., 3 * H :] = sigmoid(z[..., 3 * H :])
        c = a[..., H : 2 * H] * c + a[..., :H] * a[..., 2 * H : 3 * H]
        cs[t + 1] = c
        tcs[t] = np.tanh(c)
        h = a[..., 3 * H :] * tcs[t]
        hs[t] = h
    out = np.moveaxis(hs, 0, -2)
    return out, (X, h_init, hs, cs, acts, tcs)


def lstm_backward(params, cache, dHs, dh_last=None, dc_last=None):
    """Backpropagation through time for :func:`lstm_forward`.

    ``dHs`` has the shape of the forward output. Returns ``(dX, grads)``;
    ``grads`` also carries ``h0`` and ``c0`` entries for the initial state.
    """
    if cache is None:
        raise MissingCacheError("lstm: backward needs the cache returned by lstm_forward")
    X, h_init, hs, cs, acts, tcs = cache
    Wx, Wh = params["Wx"], params["Wh"]
    H = _hidden(params)
    T = hs.shape[0]
    dHs_t = np.moveaxis(np.asarray(dHs, dtype=DTYPE), -2, 0)
    dh_next = np.zeros_like(hs[0]) if dh_last is None else dh_last
    dc_next = np.zeros_like(hs[0]) if dc_last is None else dc_last
    dZ = np.empty_like(acts)
    WhT = np.swapaxes(Wh, -1, -2)
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, g, o = _split(a, H)
        dz, dc_next = _gate_grads(dHs_t[t] + dh_next, dc_next, cs[t], i, f, g, o, tcs[t])
        dZ[t] = dz
        dh_next = dz @ WhT

    B = X.shape[0]
    lead = Wx.shape[:-2]
    # time-major -> (..., B, T, *)
    dZ_b = np.moveaxis(dZ, 0, -2).reshape(lead + (B * T, 4 * H))
    h_prev = np.concatenate([h_init[None], hs[:-1]], axis=0)
    h_prev_b = np.moveaxis(h_prev, 0, -2).reshape(lead + (B * T, H))
    X2 = X.reshape(B * T, -1)
    grads = {
        "Wx": X2.T @ dZ_b,
        "Wh": np.swapaxes(h_prev_b, -1, -2) @ dZ_b,
        "b": dZ_b.sum(axis=-2),
        "h0": dh_next,
        "c0": dc_next,
    }
    dX = _sum_to((dZ_b @ np.swapaxes(Wx, -1, -2)).reshape(lead + (B, T, -1)), X.shape)
    return dX, grads


class LSTM(Layer):
    """Single-layer LSTM applied over a sequence; emits every hidden state."""

    kind = "lstm-cell"

    def __init__(self, input_size: int, hidden_size: int, groups: int | None = None, rng=None):
        super().__init__()
        if input_size <= 0 or hidden_size <= 0 or (groups is not None and groups <= 0):
            raise ValueError("lstm sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.groups = groups
        if rng is None:
            lead = () if groups is None else (groups,)
            self.params = {
                "Wx": np.zeros(lead + (input_size, 4 * hidden_size), dtype=DTYPE),
                "Wh": np.zeros(lead + (hidden_size, 4 * hidden_size), dtype=DTYPE),
                "b": np.zeros(lead + (4 * hidden_size,), dtype=DTYPE),
            }
        else:
            self.params = init_lstm_params(rng, input_size, hidden_size, groups)

    def spec(self):
        spec = {"kind": self.kind, "input_size": self.input_size, "hidden_size": self.hidden_size}
        if self.groups is not None:
            spec["groups"] = self.groups
        return spec

    def forward(self, x):
        return lstm_forward(self.params, x)

    def backward(self, cache, dy):
        dx, grads = lstm_backward(self.params, cache, dy)
        return dx, {k: grads[k] for k in ("Wx", "Wh", "b")}
