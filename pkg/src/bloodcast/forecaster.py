"""End-to-end forecasting model: LSTM history encoder + conditional RBM.

Training minimizes the contrastive-divergence free-energy gap on
next-visit prediction pairs. Generation draws Gibbs-chain ensembles;
multi-step trajectories feed each chain's own sample back into that
chain's LSTM state and re-sample, so every trajectory is a coherent
path rather than a set of independent marginals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import crbm
from .batching import length_batches
from .checkpoint import load_checkpoint, save_checkpoint
from .crbm import ConditioningNets, GibbsChainConfig, condition, init_conditioning_nets
from .nn import (
    AdamWConfig,
    DenseParams,
    FusedAdamW,
    LstmParams,
    LstmState,
    NumericalError,
    dense_backward,
    flatten_param_dict,
    init_lstm,
    lstm_backward,
    lstm_forward,
    lstm_forward_cached,
    lstm_step,
)
from .seeds import rng_for

FORECASTER_PARAM_COUNT = 11572

DEFAULT_WEIGHT_DECAY = {
    "lstm": 0.1,
    "bias_net": 0.1,
    "precision_net": 0.1,
    "weights_net": 0.2,
}


@dataclass
class ForecasterParams:
    lstm: LstmParams  # 10 -> 32
    nets: ConditioningNets

    def __post_init__(self) -> None:
        count = self.param_count()
        if count != FORECASTER_PARAM_COUNT:
            raise ValueError(
                f"forecaster has {count} parameters, expected {FORECASTER_PARAM_COUNT}"
            )

    def param_count(self) -> int:
        return self.lstm.param_count() + self.nets.param_count()

    def as_dict(self) -> dict[str, np.ndarray]:
        """Flat view sharing the underlying arrays (mutations propagate)."""
        return {
            "lstm.w_ih": self.lstm.w_ih,
            "lstm.w_hh": self.lstm.w_hh,
            "lstm.b_ih": self.lstm.b_ih,
            "lstm.b_hh": self.lstm.b_hh,
            "bias_net.weight": self.nets.bias_net.weight,
            "bias_net.bias": self.nets.bias_net.bias,
            "precision_net.weight": self.nets.precision_net.weight,
            "precision_net.bias": self.nets.precision_net.bias,
            "weights_net.weight": self.nets.weights_net.weight,
            "weights_net.bias": self.nets.weights_net.bias,
        }

    @classmethod
    def from_dict(cls, flat: Mapping[str, np.ndarray]) -> "ForecasterParams":
        return cls(
            lstm=LstmParams(flat["lstm.w_ih"], flat["lstm.w_hh"], flat["lstm.b_ih"], flat["lstm.b_hh"]),
            nets=ConditioningNets(
                bias_net=DenseParams(flat["bias_net.weight"], flat["bias_net.bias"]),
                precision_net=DenseParams(flat["precision_net.weight"], flat["precision_net.bias"]),
                weights_net=DenseParams(flat["weights_net.weight"], flat["weights_net.bias"]),
            ),
        )

    def save(self, stem) -> None:
        save_checkpoint(self.as_dict(), stem)

    @classmethod
    def load(cls, stem) -> "ForecasterParams":
        return cls.from_dict(load_checkpoint(stem))


def init_forecaster(seed: int) -> ForecasterParams:
    rng = rng_for(seed, "forecaster-init")
    return ForecasterParams(lstm=init_lstm(rng, 10, 32), nets=init_conditioning_nets(rng))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHT_DECAY))
    cd_k: int = 1
    seed: int = 0


@dataclass
class TrainingPair:
    patient_id: str
    history: np.ndarray  # (t, 10) transformed
    target: np.ndarray  # (10,) transformed


def make_training_pairs(
    sequences: Sequence[tuple[str, np.ndarray]],
) -> list[TrainingPair]:
    """Every (prefix, next visit) split per patient; no cross-patient mixing."""
    pairs = []
    for patient_id, matrix in sequences:
        matrix = np.asarray(matrix, dtype=np.float64)
        for t in range(1, matrix.shape[0]):
            pairs.append(TrainingPair(patient_id, matrix[:t], matrix[t]))
    return pairs


def _loss_and_grads_given_vmodel(
    params: ForecasterParams,
    histories: np.ndarray,
    targets: np.ndarray,
    v_model: np.ndarray,
    cache=None,
    cond=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """CD loss and exact gradients with the model sample held fixed."""
    batch = histories.shape[0]
    if cache is None:
        cache = lstm_forward_cached(params.lstm, histories)
    if cond is None:
        cond = condition(params.nets, cache.hidden[:, -1])
    context = cache.hidden[:, -1]

    gap = crbm.free_energy(targets, cond) - crbm.free_energy(v_model, cond)
    loss = float(np.mean(gap))

    db_d, dlam_d, dw_d = crbm.free_energy_grads(targets, cond)
    db_m, dlam_m, dw_m = crbm.free_energy_grads(v_model, cond)
    scale = 1.0 / batch
    d_b = scale * (db_d - db_m)
    d_lam = scale * (dlam_d - dlam_m)
    d_pre_lam = d_lam * crbm._softplus_grad_from_value(cond.lam)
    d_w_flat = (scale * (dw_d - dw_m)).reshape(batch, -1)

    d_wb, d_bb, d_ctx_b = dense_backward(params.nets.bias_net, context, d_b)
    d_wp, d_bp, d_ctx_p = dense_backward(params.nets.precision_net, context, d_pre_lam)
    d_ww, d_bw, d_ctx_w = dense_backward(params.nets.weights_net, context, d_w_flat)

    d_hidden = np.zeros_like(cache.hidden)
    d_hidden[:, -1] = d_ctx_b + d_ctx_p + d_ctx_w
    lstm_grads, _ = lstm_backward(params.lstm, cache, d_hidden, need_dx=False)

    grads = {
        "lstm.w_ih": lstm_grads.w_ih,
        "lstm.w_hh": lstm_grads.w_hh,
        "lstm.b_ih": lstm_grads.b_ih,
        "lstm.b_hh": lstm_grads.b_hh,
        "bias_net.weight": d_wb,
        "bias_net.bias": d_bb,
        "precision_net.weight": d_wp,
        "precision_net.bias": d_bp,
        "weights_net.weight": d_ww,
        "weights_net.bias": d_bw,
    }
    return loss, grads


def cd_objective(histories: np.ndarray, targets: np.ndarray, v_model: np.ndarray):
    """Deterministic loss closure over a flat parameter dict (for grad checks)."""

    def objective(flat: dict[str, np.ndarray]):
        params = ForecasterParams.from_dict(flat)
        return _loss_and_grads_given_vmodel(params, histories, targets, v_model)

    return objective


def train_forecaster(
    sequences: Sequence[tuple[str, np.ndarray]], config: TrainConfig
) -> ForecasterParams:
    """Minibatch CD training over shuffled next-visit pairs."""
    matrices = [np.asarray(m, dtype=np.float64) for _, m in sequences]
    if not matrices or all(m.shape[0] < 2 for m in matrices):
        raise ValueError("no training pairs")
    # pair i = (first `end[i]` visits of sequence seq_idx[i], visit end[i])
    seq_idx = np.concatenate(
        [np.full(m.shape[0] - 1, s, dtype=np.int64) for s, m in enumerate(matrices)]
    )
    end = np.concatenate(
        [np.arange(1, m.shape[0], dtype=np.int64) for m in matrices]
    )
    t_max = max(m.shape[0] for m in matrices)
    padded = np.zeros((len(matrices), t_max, matrices[0].shape[1]))
    for s, m in enumerate(matrices):
        padded[s, : m.shape[0]] = m

    vector, flat = flatten_param_dict(init_forecaster(config.seed).as_dict())
    params = ForecasterParams.from_dict(flat)
    optimizer = FusedAdamW(
        AdamWConfig(learning_rate=config.learning_rate, weight_decay=config.weight_decay),
        flat,
    )
    rng_shuffle = rng_for(config.seed, "forecaster-shuffle")
    rng_gibbs = rng_for(config.seed, "forecaster-gibbs")
    for epoch in range(config.epochs):
        for batch_idx, batch in enumerate(length_batches(end, config.batch_size, rng_shuffle)):
            length = int(end[batch[0]])
            histories = padded[seq_idx[batch], :length]
            targets = padded[seq_idx[batch], end[batch]]
            cache = lstm_forward_cached(params.lstm, histories)
            cond = condition(params.nets, cache.hidden[:, -1])
            v_model = crbm.gibbs_sample(targets, cond, config.cd_k, rng_gibbs)
            loss, grads = _loss_and_grads_given_vmodel(
                params, histories, targets, v_model, cache=cache, cond=cond
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite CD loss at epoch {epoch}, batch {batch_idx}"
                )
            optimizer.step(vector, grads)
    return params


@dataclass
class ForecastDistribution:
    samples: np.ndarray  # (n_samples, horizon, 10), transformed space
    mean: np.ndarray  # (horizon, 10)
    lo95: np.ndarray
    hi95: np.ndarray

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def validate(self) -> None:
        if not np.allclose(self.mean, self.samples.mean(axis=0)):
            raise ValueError("mean is not the sample average")
        if np.any(self.lo95 > self.mean) or np.any(self.mean > self.hi95):
            raise ValueError("percentile/mean ordering violated")


def encode_history(params: ForecasterParams, history: np.ndarray) -> np.ndarray:
    """Final LSTM hidden state (the conditioning context) for one history."""
    return lstm_forward(params.lstm, np.asarray(history, dtype=np.float64))[-1].hidden


def forecast_trajectory(
    params: ForecasterParams,
    history: np.ndarray,
    horizon: int,
    config: GibbsChainConfig,
) -> ForecastDistribution:
    """Ensemble of recurrent Gibbs trajectories with mean and 95% sleeves."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] == 0:
        raise ValueError("history must be a non-empty (t, 10) matrix")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = rng_for(config.seed, "trajectory")
    n = config.n_samples

    # Shared prefix encoded once; chains then advance their own states.
    state = lstm_forward(params.lstm, history)[-1]
    hidden = np.repeat(state.hidden[None, :], n, axis=0)
    cell = np.repeat(state.cell[None, :], n, axis=0)

    samples = np.empty((n, horizon, history.shape[1]))
    last = np.repeat(history[-1][None, :], n, axis=0)
    for step in range(horizon):
        cond = condition(params.nets, hidden)
        v0 = cond.b if config.init_at == "mean" else last
        v = crbm.gibbs_sample(v0, cond, config.steps, rng)
        samples[:, step] = v
        last = v
        if step + 1 < horizon:
            next_state = lstm_step(params.lstm, LstmState(hidden, cell), v)
            hidden, cell = next_state.hidden, next_state.cell

    mean = samples.mean(axis=0)
    lo95 = np.percentile(samples, 2.5, axis=0)
    hi95 = np.percentile(samples, 97.5, axis=0)
    dist = ForecastDistribution(samples, mean, lo95, hi95)
    dist.validate()
    return dist


def forecast_next(
    params: ForecasterParams, history: np.ndarray, config: GibbsChainConfig
) -> ForecastDistribution:
    """Single-step distribution; identical to a horizon-1 trajectory."""
    return forecast_trajectory(params, history, 1, config)
