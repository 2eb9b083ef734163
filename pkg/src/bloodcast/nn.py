"""Minimal neural-network kernel: dense and LSTM layers, losses, AdamW.

Everything is float64 numpy with hand-written reverse-mode gradients;
there is no autograd graph. LSTM parameters use the two-bias layout
(separate input-side and recurrent-side bias vectors) and gates are
stacked in the fixed order (input, forget, candidate, output).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

try:  # compiled recurrence kernels; the numpy paths below are the fallback
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


class NumericalError(RuntimeError):
    """Non-finite loss or divergent training state."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    return expit(np.asarray(x, dtype=np.float64))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bce_loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped at 1e-12."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class DenseParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def init_dense(rng: np.random.Generator, n_out: int, n_in: int) -> DenseParams:
    scale = 1.0 / np.sqrt(n_in)
    return DenseParams(
        weight=rng.uniform(-scale, scale, size=(n_out, n_in)),
        bias=rng.uniform(-scale, scale, size=n_out),
    )


def dense_forward(params: DenseParams, x: np.ndarray) -> np.ndarray:
    return x @ params.weight.T + params.bias


def dense_backward(
    params: DenseParams, x: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_weight, d_bias, d_x) for inputs of shape (B, in)."""
    d_weight = d_out.T @ x
    d_bias = d_out.sum(axis=0)
    d_x = d_out @ params.weight
    return d_weight, d_bias, d_x


@dataclass
class LstmParams:
    w_ih: np.ndarray  # (4h, in)
    w_hh: np.ndarray  # (4h, h)
    b_ih: np.ndarray  # (4h,)
    b_hh: np.ndarray  # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def param_count(self) -> int:
        return self.w_ih.size + self.w_hh.size + self.b_ih.size + self.b_hh.size


def init_lstm(rng: np.random.Generator, n_in: int, n_hidden: int) -> LstmParams:
    scale = 1.0 / np.sqrt(n_hidden)
    shape = (4 * n_hidden, n_in)
    return LstmParams(
        w_ih=rng.uniform(-scale, scale, size=shape),
        w_hh=rng.uniform(-scale, scale, size=(4 * n_hidden, n_hidden)),
        b_ih=rng.uniform(-scale, scale, size=4 * n_hidden),
        b_hh=rng.uniform(-scale, scale, size=4 * n_hidden),
    )


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray


def zero_state(params: LstmParams, batch: int | None = None) -> LstmState:
    h = params.hidden_size
    shape = (h,) if batch is None else (batch, h)
    return LstmState(np.zeros(shape), np.zeros(shape))


def _gates(params: LstmParams, state: LstmState, x: np.ndarray):
    h = params.hidden_size
    z = x @ params.w_ih.T + params.b_ih + state.hidden @ params.w_hh.T + params.b_hh
    i = sigmoid(z[..., :h])
    f = sigmoid(z[..., h : 2 * h])
    g = np.tanh(z[..., 2 * h : 3 * h])
    o = sigmoid(z[..., 3 * h :])
    return i, f, g, o


def lstm_step(params: LstmParams, state: LstmState, x: np.ndarray) -> LstmState:
    """One recurrence step; works on (in,) or batched (B, in) inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_size:
        raise ValueError(f"input size {x.shape[-1]} != {params.input_size}")
    if state.hidden.shape[-1] != params.hidden_size:
        raise ValueError("state size mismatch")
    i, f, g, o = _gates(params, state, x)
    cell = f * state.cell + i * g
    hidden = o * np.tanh(cell)
    return LstmState(hidden, cell)


def lstm_forward(params: LstmParams, xs: np.ndarray) -> list[LstmState]:
    """States after every step, from a zero initial state.

    ``xs`` is (T, in) or (B, T, in); each returned state matches the
    leading batch shape.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        if xs.shape[0] == 0:
            raise ValueError("empty input sequence")
        batch = None
    elif xs.ndim == 3:
        if xs.shape[1] == 0:
            raise ValueError("empty input sequence")
        batch = xs.shape[0]
    else:
        raise ValueError("xs must be (T, in) or (B, T, in)")
    state = zero_state(params, batch)
    states = []
    steps = xs.shape[0] if batch is None else xs.shape[1]
    for t in range(steps):
        x_t = xs[t] if batch is None else xs[:, t]
        state = lstm_step(params, state, x_t)
        states.append(state)
    return states


@dataclass
class LstmCache:
    """Activations cached for BPTT; recurrent arrays are time-major (T, B, .)."""

    xs: np.ndarray  # (B, T, in)
    gates: np.ndarray  # (T, B, 4h), sections (i, f, g, o) post-activation
    cell: np.ndarray  # (T, B, h)
    tanh_cell: np.ndarray
    hidden: np.ndarray


if _HAVE_NUMBA:

    @njit(cache=True)
    def _backward_kernel(gates, cell, tanh_cell, w_hh, d_hidden, d_pre_all):
        steps, batch, h = tanh_cell.shape
        d_h_next = np.zeros((batch, h))
        d_c_next = np.zeros((batch, h))
        for t in range(steps - 1, -1, -1):
            for b in range(batch):
                for j in range(h):
                    gi = gates[t, b, j]
                    gf = gates[t, b, h + j]
                    gg = gates[t, b, 2 * h + j]
                    go = gates[t, b, 3 * h + j]
                    tc = tanh_cell[t, b, j]
                    dh = d_hidden[t, b, j] + d_h_next[b, j]
                    dc = d_c_next[b, j] + dh * go * (1.0 - tc * tc)
                    c_prev = cell[t - 1, b, j] if t > 0 else 0.0
                    d_pre_all[t, b, j] = dc * gg * gi * (1.0 - gi)
                    d_pre_all[t, b, h + j] = dc * c_prev * gf * (1.0 - gf)
                    d_pre_all[t, b, 2 * h + j] = dc * gi * (1.0 - gg * gg)
                    d_pre_all[t, b, 3 * h + j] = dh * tc * go * (1.0 - go)
                    d_c_next[b, j] = dc * gf
            d_h_next = np.dot(d_pre_all[t], w_hh)


def _backward_py(gates, cell, tanh_cell, w_hh, d_hidden, d_pre_all):
    steps, batch, h = tanh_cell.shape
    d_h_next = np.zeros((batch, h))
    d_c_next = np.zeros((batch, h))
    for t in range(steps - 1, -1, -1):
        g_t = gates[t]
        gi, gf = g_t[:, :h], g_t[:, h : 2 * h]
        gg, go = g_t[:, 2 * h : 3 * h], g_t[:, 3 * h :]
        tc = tanh_cell[t]
        dh = d_hidden[t] + d_h_next
        dc = d_c_next + dh * go * (1.0 - tc * tc)
        c_prev = cell[t - 1] if t > 0 else np.zeros((batch, h))
        d_pre = d_pre_all[t]
        d_pre[:, :h] = dc * gg * gi * (1.0 - gi)
        d_pre[:, h : 2 * h] = dc * c_prev * gf * (1.0 - gf)
        d_pre[:, 2 * h : 3 * h] = dc * gi * (1.0 - gg * gg)
        d_pre[:, 3 * h :] = dh * tc * go * (1.0 - go)
        d_h_next = d_pre @ w_hh
        d_c_next = dc * gf


def _forward_loop(pre, w_hh_t, gates, cell, tanh_cell, hidden):
    """Time-major recurrence.

    Sigmoid gates use the exact identity sigmoid(x) = (1 + tanh(x/2)) / 2;
    numpy's tanh is vectorized where expit is not.
    """
    steps, batch, width = pre.shape
    h = width // 4
    h_prev = np.zeros((batch, h))
    c_prev = np.zeros((batch, h))
    z = np.empty((batch, width))
    zt = np.empty((batch, width))
    for t in range(steps):
        np.matmul(h_prev, w_hh_t, out=z)
        z += pre[t]
        z[:, : 2 * h] *= 0.5
        z[:, 3 * h :] *= 0.5
        np.tanh(z, out=zt)
        g_t = gates[t]
        np.multiply(zt, 0.5, out=g_t)
        g_t += 0.5
        g_t[:, 2 * h : 3 * h] = zt[:, 2 * h : 3 * h]
        c_t = cell[t]
        np.multiply(g_t[:, h : 2 * h], c_prev, out=c_t)
        c_t += g_t[:, :h] * g_t[:, 2 * h : 3 * h]
        np.tanh(c_t, out=tanh_cell[t])
        np.multiply(g_t[:, 3 * h :], tanh_cell[t], out=hidden[t])
        h_prev = hidden[t]
        c_prev = c_t


def lstm_forward_cached(params: LstmParams, xs: np.ndarray) -> LstmCache:
    """Batched forward pass retaining activations for backprop. xs: (B, T, in)."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    batch, steps, _ = xs.shape
    h = params.hidden_size
    pre = np.matmul(xs.transpose(1, 0, 2), params.w_ih.T)  # (T, B, 4h)
    pre += params.b_ih + params.b_hh
    gates = np.empty((steps, batch, 4 * h))
    cell = np.empty((steps, batch, h))
    tanh_cell = np.empty((steps, batch, h))
    hidden = np.empty((steps, batch, h))
    w_hh_t = np.ascontiguousarray(params.w_hh.T)
    _forward_loop(pre, w_hh_t, gates, cell, tanh_cell, hidden)
    return LstmCache(xs, gates, cell, tanh_cell, hidden)


@dataclass
class LstmGrads:
    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray


def lstm_backward(
    params: LstmParams, cache: LstmCache, d_hidden: np.ndarray, need_dx: bool = True
) -> tuple[LstmGrads, np.ndarray | None]:
    """Exact BPTT. ``d_hidden`` is time-major (T, B, h): loss gradient at
    every step's hidden output (zeros where a step receives no direct
    gradient). Returns parameter gradients and (B, T, in) input gradients
    (None when ``need_dx`` is off).
    """
    steps, batch, h = cache.hidden.shape
    d_pre_all = np.zeros((steps, batch, 4 * h))
    kernel = _backward_kernel if _HAVE_NUMBA else _backward_py
    kernel(
        cache.gates,
        cache.cell,
        cache.tanh_cell,
        np.ascontiguousarray(params.w_hh),
        np.ascontiguousarray(d_hidden),
        d_pre_all,
    )
    flat_pre = d_pre_all.reshape(steps * batch, 4 * h)
    xs_flat = cache.xs.transpose(1, 0, 2).reshape(steps * batch, -1)
    d_w_ih = flat_pre.T @ xs_flat
    h_prev = np.concatenate([np.zeros((1, batch, h)), cache.hidden[:-1]], axis=0)
    d_w_hh = flat_pre.T @ h_prev.reshape(steps * batch, h)
    d_b = flat_pre.sum(axis=0)
    d_xs = (d_pre_all @ params.w_ih).transpose(1, 0, 2) if need_dx else None
    return LstmGrads(d_w_ih, d_w_hh, d_b, d_b.copy()), d_xs


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must be in (0, 1)")


class AdamW:
    """Adam with decoupled per-group weight decay.

    Parameters are a flat dict keyed ``group.name``; the decay factor is
    looked up by group and applied as p -= lr * wd * p, independent of the
    gradient step.
    """

    def __init__(self, config: AdamWConfig):
        self.config = config
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _decay(self, key: str) -> float:
        group = key.split(".", 1)[0]
        try:
            return float(self.config.weight_decay[group])
        except KeyError:
            raise KeyError(f"no weight decay configured for parameter group {group!r}") from None

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for key in sorted(params):
            g = grads[key]
            m = self._m.setdefault(key, np.zeros_like(params[key]))
            v = self._v.setdefault(key, np.zeros_like(params[key]))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            params[key] -= cfg.learning_rate * self._decay(key) * params[key]
            params[key] -= cfg.learning_rate * update


def flatten_param_dict(params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Pack a parameter dict into one vector plus views into it.

    The views share the vector's memory, so in-place updates on the
    vector are visible through the dict (and vice versa).
    """
    keys = sorted(params)
    vector = np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in keys])
    views: dict[str, np.ndarray] = {}
    offset = 0
    for key in keys:
        size = params[key].size
        views[key] = vector[offset : offset + size].reshape(params[key].shape)
        offset += size
    return vector, views


class FusedAdamW:
    """AdamW on one flat parameter vector; same math as :class:`AdamW`.

    Used by the training loops to keep the optimizer out of the numpy
    call-overhead budget. Parameters must be views into ``vector`` as
    produced by :func:`flatten_param_dict`.
    """

    def __init__(self, config: AdamWConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self.keys = sorted(params)
        self.slices: dict[str, slice] = {}
        total = 0
        decay_parts = []
        for key in self.keys:
            size = params[key].size
            self.slices[key] = slice(total, total + size)
            group = key.split(".", 1)[0]
            try:
                wd = float(config.weight_decay[group])
            except KeyError:
                raise KeyError(f"no weight decay configured for parameter group {group!r}") from None
            decay_parts.append(np.full(size, wd))
            total += size
        self.decay = np.concatenate(decay_parts)
        self.step_count = 0
        self._m = np.zeros(total)
        self._v = np.zeros(total)

    def step(self, vector: np.ndarray, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        g = np.concatenate([np.asarray(grads[k]).ravel() for k in self.keys])
        self._m *= cfg.beta1
        self._m += (1.0 - cfg.beta1) * g
        self._v *= cfg.beta2
        self._v += (1.0 - cfg.beta2) * g * g
        update = (self._m / (1.0 - cfg.beta1**t)) / (
            np.sqrt(self._v / (1.0 - cfg.beta2**t)) + cfg.epsilon
        )
        vector -= cfg.learning_rate * self.decay * vector
        vector -= cfg.learning_rate * update


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_key: str
    worst_index: int
    n_checked: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    loss_and_grads: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error uses denominator max(|fd|, |analytic|, 1e-4) so
    near-zero gradients are judged on an absolute 1e-8 scale.
    """
    _, grads = loss_and_grads(params)
    worst = 0.0
    worst_key = ""
    worst_index = -1
    checked = 0
    for key in sorted(params):
        flat = params[key].reshape(-1)
        g_flat = np.asarray(grads[key]).reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            loss_plus, _ = loss_and_grads(params)
            flat[idx] = original - step
            loss_minus, _ = loss_and_grads(params)
            flat[idx] = original
            fd = (loss_plus - loss_minus) / (2.0 * step)
            denom = max(abs(fd), abs(g_flat[idx]), 1e-4)
            rel = abs(fd - g_flat[idx]) / denom
            checked += 1
            if rel > worst:
                worst, worst_key, worst_index = rel, key, idx
    return GradCheckReport(worst, worst_key, worst_index, checked)
