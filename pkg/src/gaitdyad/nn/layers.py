"""Feed-forward layers with cached forward values and analytic backward passes.

Every layer is a small object holding a ``params`` dict of float64 arrays.
``forward`` never mutates the layer: it returns the output together with a
cache tuple, and ``backward`` consumes that cache to produce the input
gradient and one gradient per parameter.

Shapes
------
dense       (B, in)      -> (B, out)
conv1d      (B, C, L)    -> (B, O, (L - k) // stride + 1)
maxpool     (B, C, L)    -> (B, C, (L - w) // stride + 1)
activation  any          -> same
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


class ShapeError(ValueError):
    """Input does not match what a layer expects."""


class MissingCacheError(RuntimeError):
    """backward called without the cache of a matching forward call."""


def sigmoid(x):
    # tanh form is overflow free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def conv_output_length(length, kernel, stride=1):
    if length < kernel:
        raise ShapeError(f"input length {length} shorter than kernel {kernel}")
    return (length - kernel) // stride + 1


def _check_cache(cache, name):
    if cache is None:
        raise MissingCacheError(f"{name}: backward needs the cache returned by forward")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_size: int, out_size: int, rng=None):
        super().__init__()
        if in_size <= 0 or out_size <= 0:
            raise ValueError("dense sizes must be positive")
        self.in_size = in_size
        self.out_size = out_size
        if rng is None:
            W = np.zeros((in_size, out_size), dtype=DTYPE)
        else:
            W = glorot_uniform(rng, (in_size, out_size), in_size, out_size)
        self.params = {"W": W, "b": np.zeros(out_size, dtype=DTYPE)}

    def spec(self):
        return {"kind": self.kind, "in_size": self.in_size, "out_size": self.out_size}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.in_size:
            raise ShapeError(
                f"dense({self.in_size}->{self.out_size}): expected (B, {self.in_size}), got {x.shape}"
            )
        y = x @ self.params["W"] + self.params["b"]
        return y, (x,)

    def backward(self, cache, dy):
        _check_cache(cache, "dense")
        (x,) = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads


class Conv1D(Layer):
    """Valid (unpadded) 1-D cross-correlation over channels-first input."""

    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, rng=None):
        super().__init__()
        if min(in_channels, out_channels, kernel, stride) <= 0:
            raise ValueError("conv1d shape parameters must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        shape = (out_channels, in_channels, kernel)
        if rng is None:
            W = np.zeros(shape, dtype=DTYPE)
        else:
            W = glorot_uniform(rng, shape, in_channels * kernel, out_channels * kernel)
        self.params = {"W": W, "b": np.zeros(out_channels, dtype=DTYPE)}

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }

    def output_length(self, length):
        return conv_output_length(length, self.kernel, self.stride)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv1d({self.in_channels}->{self.out_channels}, k={self.kernel}): "
                f"expected (B, {self.in_channels}, L), got {x.shape}"
            )
        n_out = self.output_length(x.shape[2])
        # (B, C, L_out, k)
        cols = sliding_window_view(x, self.kernel, axis=2)[:, :, :: self.stride][:, :, :n_out]
        y = np.einsum("bclk,ock->bol", cols, self.params["W"], optimize=True)
        y += self.params["b"][None, :, None]
        return y, (x.shape, cols)

    def backward(self, cache, dy):
        _check_cache(cache, "conv1d")
        x_shape, cols = cache
        W = self.params["W"]
        grads = {
            "W": np.einsum("bol,bclk->ock", dy, cols, optimize=True),
            "b": dy.sum(axis=(0, 2)),
        }
        dcols = np.einsum("bol,ock->bclk", dy, W, optimize=True)
        dx = np.zeros(x_shape, dtype=DTYPE)
        n_out = dy.shape[2]
        span = self.stride * (n_out - 1) + 1
        for j in range(self.kernel):
            dx[:, :, j : j + span : self.stride] += dcols[..., j]
        return dx, grads


class MaxPool1D(Layer):
    kind = "maxpool"

    def __init__(self, width: int, stride: int | None = None):
        super().__init__()
        stride = width if stride is None else stride
        if width <= 0 or stride <= 0:
            raise ValueError("maxpool width and stride must be positive")
        self.width = width
        self.stride = stride

    def spec(self):
        return {"kind": self.kind, "width": self.width, "stride": self.stride}

    def output_length(self, length):
        return conv_output_length(length, self.width, self.stride)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3:
            raise ShapeError(f"maxpool(w={self.width}): expected (B, C, L), got {x.shape}")
        n_out = self.output_length(x.shape[2])
        windows = sliding_window_view(x, self.width, axis=2)[:, :, :: self.stride][:, :, :n_out]
        arg = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, cache, dy):
        _check_cache(cache, "maxpool")
        x_shape, arg = cache
        dx = np.zeros(x_shape, dtype=DTYPE)
        n_out = dy.shape[2]
        span = self.stride * (n_out - 1) + 1
        for j in range(self.width):
            dx[:, :, j : j + span : self.stride] += np.where(arg == j, dy, 0.0)
        return dx, {}


class Activation(Layer):
    kind = "activation"

    def __init__(self, name: str):
        super().__init__()
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")
        self.name = name

    def spec(self):
        return {"kind": self.kind, "activation": self.name}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if self.name == "tanh":
            y = np.tanh(x)
        elif self.name == "relu":
            y = np.maximum(x, 0.0)
        elif self.name == "sigmoid":
            y = sigmoid(x)
        else:
            y = x
        return y, (x, y)

    def backward(self, cache, dy):
        _check_cache(cache, "activation")
        x, y = cache
        if self.name == "tanh":
            return dy * (1.0 - y * y), {}
        if self.name == "relu":
            return dy * (x > 0), {}
        if self.name == "sigmoid":
            return dy * y * (1.0 - y), {}
        return dy, {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv1D, MaxPool1D, Activation)}


def layer_from_spec(spec: dict) -> Layer:
    """Build an uninitialised (zero-weight) layer from its ``spec()`` dict."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "lstm-cell":
        from .lstm import LSTM

        return LSTM(**spec)
    if kind == "activation":
        return Activation(spec["activation"])
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)


class Chain:
    """Sequential composition of layers; caches are kept per layer."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dy):
        if caches is None or len(caches) != len(self.layers):
            raise MissingCacheError("chain: cache list does not match layers")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(caches[i], dy)
        return dy, grads

    def __call__(self, x):
        return self.forward(x)[0]

    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out[f"{prefix}{i}.{name}"] = value
        return out

    def named_grads(self, grads, prefix=""):
        out = {}
        for i, g in enumerate(grads):
            for name, value in g.items():
                out[f"{prefix}{i}.{name}"] = value
        return out

    def load_named(self, params, prefix=""):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = params[f"{prefix}{i}.{name}"]
