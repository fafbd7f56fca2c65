"""Numeric core: float64 tensors, a portable RNG and elementary operations.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64`` in C
(row-major) order. Every function here returns a new array and never
mutates its inputs.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE, order="C")


class Rng:
    """Seeded random stream backed by the Philox-4x64 counter-based generator.

    Philox is keyed by the seed and produces the same stream on every
    platform. ``child(*keys)`` derives an independent stream, which is how
    experiment runners hand one generator to each fold / repeat / learner.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *keys: int) -> "Rng":
        ss = np.random.SeedSequence([self.seed, *(int(k) for k in keys)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return rand_normal(self, shape, mean, std)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_EWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ewise(a, b, op: str) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {op} needs equal shapes, got {a.shape} and {b.shape}")
    try:
        fn = _EWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def sigmoid(a) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for any finite input
    a = as_tensor(a)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(a) -> np.ndarray:
    return np.tanh(as_tensor(a))


def rand_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = rng._gen.standard_normal(shape)
    return as_tensor(mean + std * z)
