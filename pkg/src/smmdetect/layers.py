"""CNN building blocks with explicit forward and backward passes.

All layers work on mini-batches: convolution and pooling take ``(N, C, L)``
arrays, dense layers take ``(N, D)``. Unbatched inputs (``(C, L)`` or
``(D,)``) are accepted and returned without the batch axis. Each layer
caches what its backward pass needs; a forward/backward pair must run on
one thread.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorcore import DTYPE, DimensionError, Rng, as_tensor


class StateError(RuntimeError):
    """Backward called without a preceding forward."""


class Layer:
    """Base class. Subclasses fill ``params`` and, after backward, ``grads``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def weight_std(init, fan_in: int) -> float:
    """``init`` is a fixed standard deviation or ``"he"`` for sqrt(2 / fan_in)."""
    if init == "he":
        return math.sqrt(2.0 / fan_in)
    return float(init)


def _batched(x, ndim):
    x = as_tensor(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected a {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


class Conv1D(Layer):
    """Same-length 1D convolution (cross-correlation) with a centred filter.

    ``M[n, k, j] = b[k] + sum_{c, i} W[k, c, i] * xpad[n, c, j + i]`` where the
    input is zero padded with ``ceil(m/2) - 1`` samples on the left and
    ``floor(m/2)`` on the right, so output width equals input width.
    """

    def __init__(self, in_channels: int, filters: int, length: int, rng: Rng | None = None,
                 init_std: float | str = "he"):
        super().__init__()
        if min(in_channels, filters, length) < 1:
            raise ValueError("in_channels, filters and length must all be >= 1")
        self.in_channels = in_channels
        self.filters = filters
        self.length = length
        self.pad_left = math.ceil(length / 2) - 1
        self.pad_right = length // 2
        rng = rng or Rng(0)
        std = weight_std(init_std, in_channels * length)
        self.params["W"] = rng.normal((filters, in_channels, length), 0.0, std)
        self.params["b"] = np.zeros(filters, dtype=DTYPE)
        self._cols = None

    def forward(self, x):
        x, single = _batched(x, 3)
        n, c, L = x.shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad_left, self.pad_right)))
        # cols[n, j, c*m]: receptive field of output position j
        cols = sliding_window_view(xp, self.length, axis=2).transpose(0, 2, 1, 3).reshape(n, L, -1)
        W = self.params["W"].reshape(self.filters, -1)
        out = (cols @ W.T).transpose(0, 2, 1) + self.params["b"][None, :, None]
        self._cols = cols
        self._in_shape = x.shape
        out = np.ascontiguousarray(out)
        return out[0] if single else out

    def backward(self, grad_out):
        if self._cols is None:
            raise StateError("Conv1D.backward called before forward")
        g, single = _batched(grad_out, 3)
        n, c, L = self._in_shape
        if g.shape != (n, self.filters, L):
            raise DimensionError(f"grad shape {g.shape} does not match conv output {(n, self.filters, L)}")
        gt = g.transpose(0, 2, 1)  # (n, L, f)
        W = self.params["W"]
        self.grads["W"] = np.tensordot(gt, self._cols, axes=([0, 1], [0, 1])).reshape(W.shape)
        self.grads["b"] = g.sum(axis=(0, 2))
        gcols = (gt @ W.reshape(self.filters, -1)).reshape(n, L, c, self.length)
        gxp = np.zeros((n, c, L + self.length - 1), dtype=DTYPE)
        for i in range(self.length):
            gxp[:, :, i:i + L] += gcols[:, :, :, i].transpose(0, 2, 1)
        gx = gxp[:, :, self.pad_left:self.pad_left + L]
        gx = np.ascontiguousarray(gx)
        return gx[0] if single else gx


class ReLU(Layer):
    def forward(self, x):
        x = as_tensor(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        if not hasattr(self, "_mask"):
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, as_tensor(grad_out), 0.0)


def pool_output_length(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


class Pool1D(Layer):
    """Max or average pooling; trailing incomplete windows are dropped."""

    def __init__(self, window: int = 3, stride: int = 2, mode: str = "max"):
        super().__init__()
        if window < 1 or stride < 1:
            raise ValueError("pool window and stride must be >= 1")
        if mode not in ("max", "average"):
            raise ValueError(f"pool mode must be 'max' or 'average', got {mode!r}")
        self.window = window
        self.stride = stride
        self.mode = mode
        self._in_shape = None

    def forward(self, x):
        x, single = _batched(x, 3)
        L = x.shape[2]
        if L < self.window:
            raise DimensionError(f"pool window {self.window} longer than input length {L}")
        views = sliding_window_view(x, self.window, axis=2)[:, :, ::self.stride, :]
        if self.mode == "max":
            self._argmax = views.argmax(axis=3)  # first occurrence on ties
            out = np.take_along_axis(views, self._argmax[..., None], axis=3)[..., 0]
        else:
            out = views.mean(axis=3)
        self._in_shape = x.shape
        out = np.ascontiguousarray(out)
        return out[0] if single else out

    def backward(self, grad_out):
        if self._in_shape is None:
            raise StateError("Pool1D.backward called before forward")
        g, single = _batched(grad_out, 3)
        n, f, L = self._in_shape
        Lo = pool_output_length(L, self.window, self.stride)
        if g.shape != (n, f, Lo):
            raise DimensionError(f"grad shape {g.shape} does not match pool output {(n, f, Lo)}")
        gx = np.zeros(self._in_shape, dtype=DTYPE)
        stop = self.stride * (Lo - 1) + 1
        for k in range(self.window):
            if self.mode == "max":
                contrib = np.where(self._argmax == k, g, 0.0)
            else:
                contrib = g / self.window
            gx[:, :, k:k + stop:self.stride] += contrib
        return gx[0] if single else gx


class Flatten(Layer):
    """Collapses ``(N, F, L)`` to ``(N, F*L)`` row by row."""

    def forward(self, x):
        x = as_tensor(x)
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return as_tensor(grad_out).reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, in_size: int, out_size: int, rng: Rng | None = None,
                 init_std: float | str = "he"):
        super().__init__()
        self.in_size = in_size
        self.out_size = out_size
        rng = rng or Rng(0)
        self.params["W"] = rng.normal((out_size, in_size), 0.0, weight_std(init_std, in_size))
        self.params["b"] = np.zeros(out_size, dtype=DTYPE)
        self._x = None

    def forward(self, x):
        x, single = _batched(x, 2)
        if x.shape[1] != self.in_size:
            raise DimensionError(f"dense expects input length {self.in_size}, got shape {x.shape}")
        self._x = x
        out = x @ self.params["W"].T + self.params["b"]
        return out[0] if single else out

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("Dense.backward called before forward")
        g, single = _batched(grad_out, 2)
        self.grads["W"] = g.T @ self._x
        self.grads["b"] = g.sum(axis=0)
        gx = g @ self.params["W"]
        return gx[0] if single else gx


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""

    def __init__(self, rate: float, rng: Rng | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng or Rng(0)
        self._mask = None

    def forward(self, x):
        x = as_tensor(x)
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad_out):
        grad_out = as_tensor(grad_out)
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


def softmax(z) -> np.ndarray:
    z = as_tensor(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(z, label):
    """Softmax cross-entropy.

    For a single logit vector ``z`` of shape ``(k,)`` and an integer label,
    returns ``(loss, probs, grad_z)`` with ``grad_z = probs - onehot``.
    For a batch ``(N, k)`` with ``N`` labels, the loss and gradient are
    averaged over the batch.
    """
    z = as_tensor(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label))
    k = zb.shape[1]
    if k < 2:
        raise ValueError("softmax needs at least two classes")
    if labels.shape != (zb.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {zb.shape[0]} logit rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k}), got {label!r}")
    shifted = zb - zb.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    probs = np.exp(logp)
    rows = np.arange(zb.shape[0])
    losses = -logp[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), probs[0], grad[0]
    n = zb.shape[0]
    return float(losses.mean()), probs, grad / n
