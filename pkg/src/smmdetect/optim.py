"""Optimizers and the portable parameter file used for transfer learning.

Parameter file layout (all integers little-endian)::

    b"SMMPARAM"                    8-byte magic
    u32 version                    currently 1
    repeated until end of file:
        u32 name_length, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 values    row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensorcore import DTYPE

MAGIC = b"SMMPARAM"
VERSION = 1


class ParamSet(dict):
    """Ordered mapping ``name -> float64 array`` of trainable parameters."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.items()}


class ParamFileError(Exception):
    """Base class for parameter-file problems."""


class ParamIOError(ParamFileError):
    pass


class ParamFormatError(ParamFileError):
    pass


class ParamVersionError(ParamFileError):
    pass


class ShapeMismatchError(ValueError):
    """A loaded tensor does not fit the target model."""


def _check_aligned(params, grads):
    if list(params) != list(grads):
        raise ValueError(f"gradient names {list(grads)} do not match parameters {list(params)}")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {grads[k].shape}, parameter has {p.shape}")


class SGDMomentum:
    """``v <- mu*v - lr*g; p <- p + v``. Parameters are updated in place."""

    kind = "sgd_momentum"

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads) -> ParamSet:
        _check_aligned(params, grads)
        for k, p in params.items():
            v = self.velocity.get(k)
            if v is None:
                v = self.velocity[k] = np.zeros_like(p)
            v *= self.momentum
            v -= self.lr * grads[k]
            p += v
        return params


class RMSProp:
    """``s <- rho*s + (1-rho)*g^2; p <- p - lr*g/(sqrt(s) + eps)``."""

    kind = "rmsprop"

    def __init__(self, lr: float = 1e-3, decay: float = 0.9, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.square_avg: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads) -> ParamSet:
        _check_aligned(params, grads)
        for k, p in params.items():
            g = grads[k]
            s = self.square_avg.get(k)
            if s is None:
                s = self.square_avg[k] = np.zeros_like(p)
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            p -= self.lr * g / (np.sqrt(s) + self.eps)
        return params


def sgd_momentum_step(state: SGDMomentum, params: ParamSet, grads) -> ParamSet:
    return state.step(params, grads)


def rmsprop_step(state: RMSProp, params: ParamSet, grads) -> ParamSet:
    return state.step(params, grads)


def make_optimizer(kind: str, **kwargs):
    if kind == "sgd_momentum":
        return SGDMomentum(**kwargs)
    if kind == "rmsprop":
        return RMSProp(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def dump_params(params) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_params(buf: bytes) -> ParamSet:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise ParamFormatError("not a parameter file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ParamVersionError(f"parameter file version {version}, expected {VERSION}")
    pos = 12
    out = ParamSet()
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + nlen > len(buf):
                raise ParamFormatError("truncated tensor name")
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ParamFormatError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            if name in out:
                raise ParamFormatError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(DTYPE)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParamFormatError(f"malformed parameter file: {exc}") from exc
    return out


def save_params(params, path) -> None:
    try:
        Path(path).write_bytes(dump_params(params))
    except OSError as exc:
        raise ParamIOError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> ParamSet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ParamIOError(f"cannot read {path}: {exc}") from exc
    return parse_params(buf)


def check_compatible(loaded, target_shapes: dict[str, tuple], names=None) -> None:
    """Raise ShapeMismatchError naming the first tensor that does not fit."""
    for name in names if names is not None else target_shapes:
        if name not in loaded:
            raise ShapeMismatchError(f"tensor {name!r} missing from loaded parameters")
        if tuple(loaded[name].shape) != tuple(target_shapes[name]):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(loaded[name].shape)}, "
                f"target model expects {tuple(target_shapes[name])}")
