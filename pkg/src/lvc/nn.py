"""Parameter containers and the model weight file format."""

from __future__ import annotations

import io
import json
import struct
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"LVCM"
VERSION = 1


class WeightFileError(ValueError):
    pass


def _list_parameters(items, name: str):
    for i, item in enumerate(items):
        if isinstance(item, Module):
            yield from item.named_parameters(f"{name}.{i}.")
        elif isinstance(item, (list, tuple)):
            yield from _list_parameters(item, f"{name}.{i}")


class Module:
    """Base class that discovers parameters by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in sorted(vars(self).items()):
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                yield from _list_parameters(value, name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, weights: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict and set(params) != set(weights):
            missing = sorted(set(params) - set(weights))
            extra = sorted(set(weights) - set(params))
            raise WeightFileError(f"weight names differ: missing={missing[:5]} extra={extra[:5]}")
        for name, p in params.items():
            if name not in weights:
                continue
            w = np.asarray(weights[name], dtype=np.float64)
            if w.shape != p.shape:
                raise WeightFileError(f"{name}: shape {w.shape} != {p.shape}")
            p.data = w.copy()


class Conv(Module):
    """3x3 (or k×k) convolution with bias, uniform init in ±sqrt(1/(C_in k²))."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3,
                 stride: int = 1, scale: float = 1.0):
        s = np.sqrt(1.0 / (cin * k * k)) * scale
        self.weight = Tensor(rng.uniform(-s, s, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros((cout, 1, 1)), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding) + self.bias


def save_weights(path_or_file, arch: dict, weights: dict[str, np.ndarray]) -> bytes:
    """Serialize ``weights`` with the embedded JSON arch descriptor.

    Returns the bytes written.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(arch, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if path_or_file is not None:
        if hasattr(path_or_file, "write"):
            path_or_file.write(data)
        else:
            with open(path_or_file, "wb") as fh:
                fh.write(data)
    return data


def parse_weights(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise WeightFileError("not a model file (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightFileError(f"unsupported model file version {version}")
        pos = 12
        arch = json.loads(data[pos : pos + n].decode("utf-8"))
        pos += n
        weights: dict[str, np.ndarray] = {}
        while pos < len(data):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + ln].decode("utf-8")
            pos += ln
            rank = data[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            weights[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightFileError(f"corrupt model file: {exc}") from exc
    return arch, weights


def load_weights(path) -> tuple[dict, dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    arch, weights = parse_weights(data)
    return arch, weights, data
