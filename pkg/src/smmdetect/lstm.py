"""LSTM cell over learned window features, unrolled for tau steps with exact BPTT.

Every gate reads the concatenation ``[h_prev, x]``. Inputs may be a single
sequence ``(tau, d)`` or a batch ``(N, tau, d)``; the state always starts at
zero unless an explicit initial state is passed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import StateError
from .tensorcore import DTYPE, DimensionError, Rng, as_tensor, sigmoid

GATES = ("f", "i", "c", "o")


@dataclass(frozen=True)
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, q: int, batch: int | None = None) -> "LstmState":
        shape = (q,) if batch is None else (batch, q)
        return cls(np.zeros(shape, dtype=DTYPE), np.zeros(shape, dtype=DTYPE))


class LstmCell:
    """``q`` LSTM units reading ``d``-dimensional inputs.

    Parameters are ``W_f, W_i, W_c, W_o`` of shape ``(q, q + d)`` and biases
    ``b_f, b_i, b_c, b_o`` of shape ``(q,)``. Weights start as N(0, init_std)
    and the forget bias at ``forget_bias``.
    """

    def __init__(self, d: int, q: int, rng: Rng | None = None, init_std: float = 0.1,
                 forget_bias: float = 1.0):
        if d < 1 or q < 1:
            raise ValueError(f"LSTM needs d >= 1 and q >= 1, got d={d}, q={q}")
        self.d = d
        self.q = q
        rng = rng or Rng(0)
        self.params: dict[str, np.ndarray] = {}
        for g in GATES:
            self.params[f"W_{g}"] = rng.normal((q, q + d), 0.0, init_std)
        for g in GATES:
            self.params[f"b_{g}"] = np.full(q, forget_bias if g == "f" else 0.0, dtype=DTYPE)
        self.grads: dict[str, np.ndarray] = {}
        self._trajectory = None

    def _stacked(self):
        W = np.concatenate([self.params[f"W_{g}"] for g in GATES], axis=0)
        b = np.concatenate([self.params[f"b_{g}"] for g in GATES])
        return W, b

    def _step(self, W, b, c_prev, h_prev, x):
        q = self.q
        z = np.concatenate([h_prev, x], axis=-1)
        a = z @ W.T + b
        f = sigmoid(a[..., :q])
        i = sigmoid(a[..., q:2 * q])
        g = np.tanh(a[..., 2 * q:3 * q])
        o = sigmoid(a[..., 3 * q:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return c, h, (z, f, i, g, o, c_prev, tc)

    def step(self, state: LstmState, x) -> LstmState:
        x = as_tensor(x)
        if x.shape[-1] != self.d:
            raise DimensionError(f"LSTM expects input length {self.d}, got shape {x.shape}")
        if state.h.shape[-1] != self.q or state.c.shape[-1] != self.q:
            raise DimensionError(f"LSTM state must have length {self.q}")
        W, b = self._stacked()
        c, h, _ = self._step(W, b, state.c, state.h, x)
        return LstmState(c, h)

    def forward(self, xs, init: LstmState | None = None) -> np.ndarray:
        """Run the cell over ``xs`` and return the final output ``h``."""
        xs = as_tensor(xs)
        single = xs.ndim == 2
        if single:
            xs = xs[None]
        if xs.ndim != 3 or xs.shape[2] != self.d:
            raise DimensionError(f"LSTM expects (N, tau, {self.d}) inputs, got shape {xs.shape}")
        n, tau, _ = xs.shape
        if tau < 1:
            raise ValueError("LSTM sequence must contain at least one step")
        if init is None:
            init = LstmState.zeros(self.q, n)
        c = np.broadcast_to(init.c, (n, self.q))
        h = np.broadcast_to(init.h, (n, self.q))
        if c.shape[-1] != self.q:
            raise DimensionError(f"initial state must have length {self.q}")
        W, b = self._stacked()
        caches = []
        for t in range(tau):
            c, h, cache = self._step(W, b, c, h, xs[:, t])
            caches.append(cache)
        self._trajectory = (W, caches, single)
        return h[0] if single else h

    def backward(self, grad_h) -> np.ndarray:
        """BPTT from a gradient on the final ``h``.

        Fills ``self.grads`` for all eight parameter tensors and returns the
        gradient with respect to every input step, shaped like ``xs``.
        """
        if self._trajectory is None:
            raise StateError("LstmCell.backward called before forward")
        W, caches, single = self._trajectory
        q = self.q
        dh = as_tensor(grad_h)
        if single:
            dh = dh[None]
        n = caches[0][0].shape[0]
        if dh.shape != (n, q):
            raise DimensionError(f"grad_h shape {dh.shape} does not match LSTM output {(n, q)}")
        dc = np.zeros((n, q), dtype=DTYPE)
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[0], dtype=DTYPE)
        dxs = np.zeros((n, len(caches), self.d), dtype=DTYPE)
        for t in range(len(caches) - 1, -1, -1):
            z, f, i, g, o, c_prev, tc = caches[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * c_prev * f * (1.0 - f),
                dc * g * i * (1.0 - i),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dW += da.T @ z
            db += da.sum(axis=0)
            dz = da @ W
            dh = dz[:, :q]
            dxs[:, t] = dz[:, q:]
            dc = dc * f
        for k, gname in enumerate(GATES):
            self.grads[f"W_{gname}"] = dW[k * q:(k + 1) * q]
            self.grads[f"b_{gname}"] = db[k * q:(k + 1) * q]
        return dxs[0] if single else dxs


def lstm_step(cell: LstmCell, state: LstmState, x) -> LstmState:
    return cell.step(state, x)


def lstm_forward_sequence(cell: LstmCell, xs, init: LstmState | None = None) -> np.ndarray:
    return cell.forward(xs, init)


def lstm_backward_sequence(cell: LstmCell, grad_h_final) -> tuple[dict, np.ndarray]:
    dxs = cell.backward(grad_h_final)
    return dict(cell.grads), dxs
