"""Progression-event annotator: 6 derived features -> LSTM -> dense softmax.

The six inputs are M-protein, the two serum free light chains, their
ratio, and two difference features. Ratios and differences are computed
in raw space (the ratio with a 1e-6 denominator floor, differences zero
at the first visit) and the six columns are then power-transformed with
parameters fitted on training folds.

The classifier scores every prefix of a patient's series; training
balances the rare positive class by upsampling, freshly re-drawn each
epoch, while evaluation always runs on the untouched imbalanced split.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import FEATURES, PatientRecord
from .nn import (
    AdamWConfig,
    DenseParams,
    FusedAdamW,
    LstmParams,
    NumericalError,
    bce_loss,
    dense_backward,
    dense_forward,
    flatten_param_dict,
    init_dense,
    init_lstm,
    lstm_backward,
    lstm_forward_cached,
    softmax,
)
from .batching import length_batches
from .seeds import rng_for

ANNOTATION_FEATURES = ("mpr", "sfl_kappa", "sfl_lambda", "sfl_ratio", "delta_kappa", "delta_lambda")

ANNOTATOR_PARAM_COUNT = 530

RATIO_FLOOR = 1e-6

_MPR = FEATURES.index("mpr")
_KAPPA = FEATURES.index("sfl_kappa")
_LAMBDA = FEATURES.index("sfl_lambda")


def derive_feature_matrix(lab_matrix: np.ndarray, mode: str = "temporal") -> np.ndarray:
    """Raw-space (T, 6) annotation features from an imputed (T, 10) lab matrix.

    mode "temporal": differences are per-visit deltas of each light chain.
    mode "involved": differences are the kappa-lambda gap and its delta.
    """
    labs = np.asarray(lab_matrix, dtype=np.float64)
    if np.isnan(labs).any():
        raise ValueError("lab matrix contains missing values, impute first")
    mpr = labs[:, _MPR]
    kappa = labs[:, _KAPPA]
    lam = labs[:, _LAMBDA]
    ratio = kappa / np.maximum(lam, RATIO_FLOOR)
    if mode == "temporal":
        diff_a = np.concatenate([[0.0], np.diff(kappa)])
        diff_b = np.concatenate([[0.0], np.diff(lam)])
    elif mode == "involved":
        gap = kappa - lam
        diff_a = gap
        diff_b = np.concatenate([[0.0], np.diff(gap)])
    else:
        raise ValueError(f"unknown sfl difference mode {mode!r}")
    return np.column_stack([mpr, kappa, lam, ratio, diff_a, diff_b])


def derive_features(record: PatientRecord, mode: str = "temporal") -> np.ndarray:
    return derive_feature_matrix(record.lab_matrix(), mode)


@dataclass
class AnnotatorParams:
    lstm: LstmParams  # 6 -> 8
    head: DenseParams  # 8 -> 2

    def __post_init__(self) -> None:
        count = self.param_count()
        if count != ANNOTATOR_PARAM_COUNT:
            raise ValueError(f"annotator has {count} parameters, expected {ANNOTATOR_PARAM_COUNT}")

    def param_count(self) -> int:
        return self.lstm.param_count() + self.head.param_count()

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "lstm.w_ih": self.lstm.w_ih,
            "lstm.w_hh": self.lstm.w_hh,
            "lstm.b_ih": self.lstm.b_ih,
            "lstm.b_hh": self.lstm.b_hh,
            "head.weight": self.head.weight,
            "head.bias": self.head.bias,
        }

    @classmethod
    def from_dict(cls, flat: Mapping[str, np.ndarray]) -> "AnnotatorParams":
        return cls(
            lstm=LstmParams(flat["lstm.w_ih"], flat["lstm.w_hh"], flat["lstm.b_ih"], flat["lstm.b_hh"]),
            head=DenseParams(flat["head.weight"], flat["head.bias"]),
        )

    def save(self, stem) -> None:
        save_checkpoint(self.as_dict(), stem)

    @classmethod
    def load(cls, stem) -> "AnnotatorParams":
        return cls.from_dict(load_checkpoint(stem))


def init_annotator(seed: int) -> AnnotatorParams:
    rng = rng_for(seed, "annotator-init")
    return AnnotatorParams(lstm=init_lstm(rng, 6, 8), head=init_dense(rng, 2, 8))


@dataclass
class AnnotatorTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: dict[str, float] = field(default_factory=lambda: {"lstm": 1.0, "head": 1.0})
    seed: int = 0


@dataclass(frozen=True)
class Instance:
    """One labeled prefix: sequence ``seq_index`` up to and including ``end``."""

    seq_index: int
    end: int
    label: int


def build_instances(labels_per_sequence: Sequence[np.ndarray]) -> list[Instance]:
    instances = []
    for seq_index, labels in enumerate(labels_per_sequence):
        for end, label in enumerate(np.asarray(labels)):
            instances.append(Instance(seq_index, end, int(label)))
    return instances


def upsample_balance(
    instances: Sequence[tuple], seed: int | np.random.Generator
) -> list[tuple]:
    """Balance (item, label) pairs by duplicating the minority class.

    All original pairs are retained; extras are drawn with replacement
    until both class counts are equal.
    """
    labels = np.array([int(label) for _, label in instances])
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("both classes must be present to balance")
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    minority, majority = (pos_idx, neg_idx) if pos_idx.size < neg_idx.size else (neg_idx, pos_idx)
    extra = rng.choice(minority, size=majority.size - minority.size, replace=True)
    out = list(instances)
    out.extend(instances[i] for i in extra)
    return out


def _annotate_hidden(params: AnnotatorParams, features: np.ndarray) -> np.ndarray:
    cache = lstm_forward_cached(params.lstm, features[None, :, :])
    return cache.hidden[0]  # (T, 8)


def annotate(params: AnnotatorParams, features: np.ndarray) -> np.ndarray:
    """Progression probability after each visit, one causal LSTM pass."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty (T, 6) matrix")
    hidden = _annotate_hidden(params, features)
    probs = softmax(dense_forward(params.head, hidden))
    return probs[:, 1]


def _batch_loss_and_grads(
    params: AnnotatorParams, xs: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """BCE on the softmax positive-class probability of each final state."""
    batch = xs.shape[0]
    cache = lstm_forward_cached(params.lstm, xs)
    final_hidden = cache.hidden[:, -1]
    logits = dense_forward(params.head, final_hidden)
    p_pos = softmax(logits)[:, 1]
    loss = bce_loss(p_pos, labels)

    d_pos = (p_pos - labels) / batch  # d loss / d (logit_1 - logit_0)
    d_logits = np.column_stack([-d_pos, d_pos])
    d_w, d_b, d_hidden_final = dense_backward(params.head, final_hidden, d_logits)
    d_hidden = np.zeros_like(cache.hidden)
    d_hidden[:, -1] = d_hidden_final
    lstm_grads, _ = lstm_backward(params.lstm, cache, d_hidden, need_dx=False)
    grads = {
        "lstm.w_ih": lstm_grads.w_ih,
        "lstm.w_hh": lstm_grads.w_hh,
        "lstm.b_ih": lstm_grads.b_ih,
        "lstm.b_hh": lstm_grads.b_hh,
        "head.weight": d_w,
        "head.bias": d_b,
    }
    return loss, grads


def bce_objective(xs: np.ndarray, labels: np.ndarray):
    """Deterministic loss closure over a flat parameter dict (for grad checks)."""

    def objective(flat: dict[str, np.ndarray]):
        return _batch_loss_and_grads(AnnotatorParams.from_dict(flat), xs, labels)

    return objective


def train_annotator(
    sequences: Sequence[tuple[np.ndarray, np.ndarray]], config: AnnotatorTrainConfig
) -> AnnotatorParams:
    """Train on every labeled prefix, re-balancing classes each epoch.

    ``sequences`` holds (features (T, 6) transformed, labels (T,)) pairs.
    """
    feats = [np.asarray(f, dtype=np.float64) for f, _ in sequences]
    base_instances = build_instances([labels for _, labels in sequences])
    if not base_instances:
        raise ValueError("no training instances")
    inst_seq = np.array([inst.seq_index for inst in base_instances], dtype=np.int64)
    inst_end = np.array([inst.end for inst in base_instances], dtype=np.int64)
    inst_label = np.array([inst.label for inst in base_instances], dtype=np.float64)
    t_max = max(f.shape[0] for f in feats)
    padded = np.zeros((len(feats), t_max, feats[0].shape[1]))
    for s, f in enumerate(feats):
        padded[s, : f.shape[0]] = f

    vector, flat = flatten_param_dict(init_annotator(config.seed).as_dict())
    params = AnnotatorParams.from_dict(flat)
    optimizer = FusedAdamW(
        AdamWConfig(learning_rate=config.learning_rate, weight_decay=config.weight_decay),
        flat,
    )
    base_pairs = [(i, inst.label) for i, inst in enumerate(base_instances)]
    for epoch in range(config.epochs):
        rng = rng_for(config.seed, "annotator-epoch", epoch)
        balanced = np.array([i for i, _ in upsample_balance(base_pairs, rng)], dtype=np.int64)
        for batch_of_balanced in length_batches(inst_end[balanced] + 1, config.batch_size, rng):
            batch = balanced[batch_of_balanced]
            length = int(inst_end[batch[0]]) + 1
            xs = padded[inst_seq[batch], :length]
            labels = inst_label[batch]
            loss, grads = _batch_loss_and_grads(params, xs, labels)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite BCE loss at epoch {epoch}")
            optimizer.step(vector, grads)
    return params


def score_sequences(
    params: AnnotatorParams, sequences: Sequence[tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray]:
    """Flatten per-visit probabilities and labels across sequences."""
    scores = []
    labels = []
    for feats, labs in sequences:
        scores.append(annotate(params, feats))
        labels.append(np.asarray(labs))
    return np.concatenate(scores), np.concatenate(labels)


def fbeta_score(precision: float, recall: float, beta: float) -> float:
    if precision == 0.0 and recall == 0.0:
        return 0.0
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + b2) * precision * recall / denom


@dataclass
class ThresholdCalibration:
    beta: float
    threshold: float
    achieved_fbeta: float
    curve: list[tuple[float, float, float, float]]  # (threshold, precision, recall, fbeta)

    def save_csv(self, path) -> None:
        import csv
        from pathlib import Path

        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("beta", "threshold", "achieved_fbeta"))
            writer.writerow((repr(self.beta), repr(self.threshold), repr(self.achieved_fbeta)))

    @classmethod
    def load_csv(cls, path) -> "ThresholdCalibration":
        import csv
        from pathlib import Path

        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        beta, threshold, fbeta = (float(v) for v in rows[1])
        return cls(beta, threshold, fbeta, curve=[])


def calibrate_threshold(
    scores: np.ndarray, labels: np.ndarray, beta: float = 5.0
) -> ThresholdCalibration:
    """Pick the flag threshold maximizing F_beta over observed score values.

    A point is flagged when score >= threshold; ties in F_beta break
    toward the lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if labels.min() == labels.max():
        raise ValueError("both classes must be present to calibrate")
    thresholds = np.unique(scores)
    n_pos = int(labels.sum())
    curve = []
    best = (-1.0, 0.0)
    for thr in thresholds:
        flagged = scores >= thr
        tp = int(np.sum(flagged & (labels == 1)))
        fp = int(np.sum(flagged & (labels == 0)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / n_pos
        fb = fbeta_score(precision, recall, beta)
        curve.append((float(thr), precision, recall, fb))
        if fb > best[0]:
            best = (fb, float(thr))
    return ThresholdCalibration(beta, best[1], best[0], curve)
