"""Dense numeric layers with explicit reverse-mode backward passes.

Every ``forward`` returns ``(output, cache)``; the matching ``backward``
consumes the cache, accumulates parameter gradients into ``Param.grad`` and
returns the gradient with respect to the layer input.  Sequences are handled
time-major: ``(T, B, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend


@dataclass
class Param:
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"grad shape {self.grad.shape} != values shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def fc_forward(x, weights, bias):
    """``y = W x + b`` for a single vector or row-stacked batch ``x``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"fc shape mismatch: x {x.shape}, W {weights.shape}, b {bias.shape}"
        )
    return x @ weights.T + bias


class Dense:
    """Fully-connected layer, weights stored ``(out, in)``."""

    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(_uniform(rng, (n_out, n_in), n_in, dtype))
        self.bias = Param(np.zeros(n_out, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return fc_forward(x, self.weight.values, self.bias.values), x

    def backward(self, dy, x):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.weight.grad += dy2.T @ x2
        self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.values


def relu_forward(x):
    return np.maximum(x, 0.0), x

def relu_backward(dy, x):
    return dy * (x > 0)


@dataclass
class LstmCellParams:
    """Gate-stacked LSTM weights in input, forget, cell, output order.

    ``w_x`` is ``(4H, I)``, ``w_h`` is ``(4H, H)``, ``b`` is ``(4H,)``.
    """

    w_x: Param
    w_h: Param
    b: Param

    @property
    def hidden_size(self):
        return self.w_h.shape[1]

    @property
    def input_size(self):
        return self.w_x.shape[1]

    @classmethod
    def init(cls, n_in, hidden, rng, dtype=np.float64, forget_bias=1.0):
        w_x = _uniform(rng, (4 * hidden, n_in), n_in, dtype)
        w_h = _uniform(rng, (4 * hidden, hidden), hidden, dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = forget_bias
        return cls(Param(w_x), Param(w_h), Param(b))

    def check(self):
        H = self.hidden_size
        if self.w_x.shape[0] != 4 * H or self.w_h.shape != (4 * H, H) or self.b.shape != (4 * H,):
            raise ValueError("inconsistent LSTM parameter shapes")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(x_t, h_prev, c_prev, params: LstmCellParams):
    """One LSTM time step; reference implementation for the fused kernels."""
    params.check()
    H = params.hidden_size
    z = x_t @ params.w_x.values.T + h_prev @ params.w_h.values.T + params.b.values
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


class LSTM:
    """Single-direction LSTM over a time-major batch, zero initial state."""

    def __init__(self, n_in, hidden, rng=None, dtype=np.float64, reverse=False, backend=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cell = LstmCellParams.init(n_in, hidden, rng, dtype)
        self.reverse = reverse
        self.backend = backend

    def params(self):
        return {"w_x": self.cell.w_x, "w_h": self.cell.w_h, "b": self.cell.b}

    def forward(self, x):
        T, B, n_in = x.shape
        kern = _backend.get(self.backend)
        dtype = self.cell.w_x.values.dtype
        x = np.ascontiguousarray(x, dtype=dtype)
        xw = (x.reshape(T * B, n_in) @ self.cell.w_x.values.T + self.cell.b.values)
        xw = np.ascontiguousarray(xw.reshape(T, B, -1))
        w_h_t = np.ascontiguousarray(self.cell.w_h.values.T)
        hs, cs, gates = kern.lstm_forward(xw, w_h_t, self.reverse)
        return hs, (x, hs, cs, gates, w_h_t)

    def backward(self, dhs, cache):
        x, hs, cs, gates, w_h_t = cache
        T, B, n_in = x.shape
        kern = _backend.get(self.backend)
        dhs = np.ascontiguousarray(dhs, dtype=hs.dtype)
        dg, dwh = kern.lstm_backward(dhs, hs, cs, gates, w_h_t, self.reverse)
        dg2 = dg.reshape(T * B, -1)
        self.cell.w_h.grad += dwh.T
        self.cell.w_x.grad += dg2.T @ x.reshape(T * B, n_in)
        self.cell.b.grad += dg2.sum(axis=0)
        return (dg2 @ self.cell.w_x.values).reshape(T, B, n_in)


class BiLSTM:
    """Forward and backward LSTMs with per-step concatenated outputs ``(T, B, 2H)``."""

    def __init__(self, n_in, hidden, rng=None, dtype=np.float64, backend=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.fwd = LSTM(n_in, hidden, rng, dtype, reverse=False, backend=backend)
        self.bwd = LSTM(n_in, hidden, rng, dtype, reverse=True, backend=backend)

    def params(self):
        out = {f"fwd.{k}": p for k, p in self.fwd.params().items()}
        out.update({f"bwd.{k}": p for k, p in self.bwd.params().items()})
        return out

    def forward(self, x):
        hf, cf = self.fwd.forward(x)
        hb, cb = self.bwd.forward(x)
        return np.concatenate([hf, hb], axis=-1), (cf, cb)

    def backward(self, dy, cache):
        cf, cb = cache
        H = self.hidden
        return self.fwd.backward(dy[..., :H], cf) + self.bwd.backward(dy[..., H:], cb)


class StackedBiLSTM:
    def __init__(self, n_in, hidden, num_layers=2, rng=None, dtype=np.float64, backend=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for k in range(num_layers):
            self.layers.append(BiLSTM(n_in if k == 0 else 2 * hidden, hidden, rng, dtype, backend))

    def params(self):
        out = {}
        for k, layer in enumerate(self.layers):
            out.update({f"l{k}.{n}": p for n, p in layer.params().items()})
        return out

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


def bilstm_forward(seq, fwd: LstmCellParams, bwd: LstmCellParams):
    """Run one bidirectional layer on a single ``(T, C)`` sequence -> ``(T, 2H)``.

    Plain per-step loop over ``lstm_step``; used as the reference the batched
    layers are checked against.
    """
    seq = np.asarray(seq)
    T = seq.shape[0]
    H = fwd.hidden_size
    out = np.zeros((T, 2 * H), dtype=seq.dtype)
    h = np.zeros(H, dtype=seq.dtype)
    c = np.zeros(H, dtype=seq.dtype)
    for t in range(T):
        h, c = lstm_step(seq[t], h, c, fwd)
        out[t, :H] = h
    h = np.zeros(H, dtype=seq.dtype)
    c = np.zeros(H, dtype=seq.dtype)
    for t in range(T - 1, -1, -1):
        h, c = lstm_step(seq[t], h, c, bwd)
        out[t, H:] = h
    return out
