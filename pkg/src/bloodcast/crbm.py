"""Conditional Gaussian-Bernoulli restricted Boltzmann machine.

Three affine heads map a 32-dim context vector to the machine's
parameters: a visible mean bias b (10), visible precisions lambda (10,
softplus plus a 1e-4 floor) and an interaction matrix W (10x16). The
hidden bias is identically zero. Energy of a joint state:

    E(v, h | c) = 1/2 sum_i lambda_i (v_i - b_i)^2 - v^T W h

which gives exact conditionals p(h_j=1|v) = sigmoid((v^T W)_j) and
v | h ~ Normal(b + (W h) / lambda, diag(1/lambda)), and the closed-form
free energy used by the contrastive-divergence loss.

All operations accept a single conditional (arrays (10,), (10,16)) or a
batch of per-example conditionals with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseParams, dense_forward, init_dense, sigmoid, softplus

N_VISIBLE = 10
N_HIDDEN = 16
N_CONTEXT = 32
EPS_PRECISION = 1e-4

CONDITIONING_PARAM_COUNT = 5940


@dataclass
class ConditioningNets:
    bias_net: DenseParams  # 32 -> 10
    precision_net: DenseParams  # 32 -> 10
    weights_net: DenseParams  # 32 -> 160, reshaped (10, 16)

    def __post_init__(self) -> None:
        count = self.param_count()
        if count != CONDITIONING_PARAM_COUNT:
            raise ValueError(
                f"conditioning networks have {count} parameters, expected {CONDITIONING_PARAM_COUNT}"
            )

    def param_count(self) -> int:
        return (
            self.bias_net.param_count()
            + self.precision_net.param_count()
            + self.weights_net.param_count()
        )


def init_conditioning_nets(rng: np.random.Generator) -> ConditioningNets:
    return ConditioningNets(
        bias_net=init_dense(rng, N_VISIBLE, N_CONTEXT),
        precision_net=init_dense(rng, N_VISIBLE, N_CONTEXT),
        weights_net=init_dense(rng, N_VISIBLE * N_HIDDEN, N_CONTEXT),
    )


@dataclass
class CrbmCond:
    """Conditioned machine parameters; leading axes are batch axes."""

    b: np.ndarray  # (..., 10)
    lam: np.ndarray  # (..., 10), strictly positive
    w: np.ndarray  # (..., 10, 16)


@dataclass
class GibbsChainConfig:
    steps: int = 32
    n_samples: int = 1000
    seed: int = 0
    init_at: str = "mean"  # chain start: conditional mean, or "last" observation

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.init_at not in ("mean", "last"):
            raise ValueError("init_at must be 'mean' or 'last'")


def condition(nets: ConditioningNets, context: np.ndarray) -> CrbmCond:
    """Map context vector(s) (..., 32) to machine parameters."""
    context = np.asarray(context, dtype=np.float64)
    b = dense_forward(nets.bias_net, context)
    lam = softplus(dense_forward(nets.precision_net, context)) + EPS_PRECISION
    w = dense_forward(nets.weights_net, context).reshape(context.shape[:-1] + (N_VISIBLE, N_HIDDEN))
    return CrbmCond(b, lam, w)


def _vw(v: np.ndarray, cond: CrbmCond) -> np.ndarray:
    return np.einsum("...i,...ij->...j", v, cond.w)


def hidden_given_visible(v: np.ndarray, cond: CrbmCond) -> np.ndarray:
    """Bernoulli activation probabilities of the 16 hidden units."""
    return sigmoid(_vw(np.asarray(v, dtype=np.float64), cond))


def visible_given_hidden(
    h: np.ndarray, cond: CrbmCond, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional mean and one sample of the visible units."""
    h = np.asarray(h, dtype=np.float64)
    mean = cond.b + np.einsum("...ij,...j->...i", cond.w, h) / cond.lam
    sample = mean + rng.standard_normal(mean.shape) / np.sqrt(cond.lam)
    return mean, sample


def energy(v: np.ndarray, h: np.ndarray, cond: CrbmCond) -> np.ndarray:
    """Joint energy E(v, h | c); hidden bias is zero by construction."""
    quad = 0.5 * np.sum(cond.lam * (v - cond.b) ** 2, axis=-1)
    return quad - np.sum(_vw(v, cond) * h, axis=-1)


def free_energy(v: np.ndarray, cond: CrbmCond) -> np.ndarray:
    """F(v|c) = -log sum_h exp(-E(v, h|c)), reduced over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    quad = 0.5 * np.sum(cond.lam * (v - cond.b) ** 2, axis=-1)
    return quad - np.sum(softplus(_vw(v, cond)), axis=-1)


def gibbs_sample(
    v0: np.ndarray, cond: CrbmCond, config: GibbsChainConfig | int, rng: np.random.Generator
) -> np.ndarray:
    """Alternate the two exact conditionals and return the final visible state."""
    steps = config if isinstance(config, int) else config.steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    v = np.asarray(v0, dtype=np.float64)
    for _ in range(steps):
        p_h = hidden_given_visible(v, cond)
        h = (rng.random(p_h.shape) < p_h).astype(np.float64)
        _, v = visible_given_hidden(h, cond, rng)
    return v


def free_energy_grads(
    v: np.ndarray, cond: CrbmCond
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dF/db, dF/dlambda and dF/dW at fixed v."""
    v = np.asarray(v, dtype=np.float64)
    resid = v - cond.b
    d_b = -cond.lam * resid
    d_lam = 0.5 * resid**2
    d_w = -np.einsum("...i,...j->...ij", v, sigmoid(_vw(v, cond)))
    return d_b, d_lam, d_w


def _softplus_grad_from_value(lam: np.ndarray) -> np.ndarray:
    # sigmoid(a) recovered from softplus(a) = lam - floor: 1 - exp(-softplus)
    return -np.expm1(-(lam - EPS_PRECISION))


@dataclass
class CdResult:
    loss: float
    v_model: np.ndarray
    d_b: np.ndarray  # gradients of the mean loss w.r.t. b
    d_pre_lam: np.ndarray  # ... w.r.t. the pre-softplus precision activation
    d_w: np.ndarray  # ... w.r.t. W


def cd_step(
    v_data: np.ndarray, cond: CrbmCond, k: int, rng: np.random.Generator
) -> CdResult:
    """One contrastive-divergence step.

    Runs a k-step Gibbs chain from the data, forms the free-energy gap
    loss F(v_data) - F(v_model) averaged over any batch axis, and returns
    its gradients w.r.t. the conditioned parameters with the sampled
    v_model treated as a constant (no gradient through the sampler).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    v_data = np.asarray(v_data, dtype=np.float64)
    v_model = gibbs_sample(v_data, cond, k, rng)
    gap = free_energy(v_data, cond) - free_energy(v_model, cond)
    batch = int(np.prod(gap.shape)) if gap.shape else 1
    loss = float(np.mean(gap))
    db_d, dlam_d, dw_d = free_energy_grads(v_data, cond)
    db_m, dlam_m, dw_m = free_energy_grads(v_model, cond)
    scale = 1.0 / batch
    d_b = scale * (db_d - db_m)
    d_lam = scale * (dlam_d - dlam_m)
    d_w = scale * (dw_d - dw_m)
    d_pre_lam = d_lam * _softplus_grad_from_value(cond.lam)
    return CdResult(loss, v_model, d_b, d_pre_lam, d_w)
