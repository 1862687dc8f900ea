"""Self-describing binary weight files ("DYFW") plus a JSON hyperparameter sidecar.

Layout (all integers little-endian)::

    b"DYFW" | u16 version | u32 layer count
    per layer:
        u16 name length | name (utf-8)
        u32 spec length | spec (compact JSON, sorted keys)
        u16 parameter count
        per parameter:
            u16 name length | name | u8 ndim | u32 dims[ndim] | f64 data (C order)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .layers import Layer, layer_from_spec

MAGIC = b"DYFW"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_str(buf, s, fmt):
    data = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(data)))
    buf.write(data)


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated DYFW stream")
    return data


def _read_str(buf, fmt):
    (n,) = struct.unpack(fmt, _read_exact(buf, struct.calcsize(fmt)))
    return _read_exact(buf, n).decode("utf-8")


def dumps(layers: list[tuple[str, Layer]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(layers)))
    for name, layer in layers:
        _write_str(buf, name, "<H")
        _write_str(buf, json.dumps(layer.spec(), sort_keys=True, separators=(",", ":")), "<I")
        buf.write(struct.pack("<H", len(layer.params)))
        for pname in sorted(layer.params):
            arr = np.ascontiguousarray(layer.params[pname], dtype="<f8")
            _write_str(buf, pname, "<H")
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> list[tuple[str, Layer]]:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise FormatError("not a DYFW file (bad magic)")
    version, count = struct.unpack("<HI", _read_exact(buf, 6))
    if version != VERSION:
        raise FormatError(f"unsupported DYFW version {version}")
    layers = []
    for _ in range(count):
        name = _read_str(buf, "<H")
        layer = layer_from_spec(json.loads(_read_str(buf, "<I")))
        (n_params,) = struct.unpack("<H", _read_exact(buf, 2))
        for _ in range(n_params):
            pname = _read_str(buf, "<H")
            (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").reshape(shape)
            if pname not in layer.params or layer.params[pname].shape != arr.shape:
                raise FormatError(f"layer {name!r}: unexpected parameter {pname!r} {shape}")
            layer.params[pname] = arr.astype(np.float64)
        layers.append((name, layer))
    if buf.read(1):
        raise FormatError("trailing bytes after DYFW payload")
    return layers


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save(path, layers, hyperparams: dict | None = None):
    path = Path(path)
    path.write_bytes(dumps(layers))
    sidecar_path(path).write_text(json.dumps(hyperparams or {}, indent=2, sort_keys=True) + "\n")


def load(path):
    """Return ``(layers, hyperparams)``."""
    path = Path(path)
    layers = loads(path.read_bytes())
    side = sidecar_path(path)
    hyper = json.loads(side.read_text()) if side.exists() else {}
    return layers, hyper
