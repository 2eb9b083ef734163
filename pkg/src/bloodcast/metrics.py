"""Verification and validation statistics.

Ranking metrics use the conventional estimators: AUROC is the midrank
(ties count one half) concordance probability and AUPRC is the
step-wise average-precision sum without interpolation. The combined
pipeline evaluation forecasts m steps from the first n observed visits,
annotates progression within the forecast, and grades the annotation at
visit n+m against the actually observed label there.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .annotator import AnnotatorParams, annotate, derive_feature_matrix
from .cohort import Cohort
from .crbm import GibbsChainConfig
from .forecaster import ForecasterParams, forecast_trajectory
from .preprocess import PowerTransform, apply_transform, invert_transform
from .seeds import derive_seed
from .synth import empirical_moments


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need equal-length inputs with at least 3 points")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise ValueError("zero variance input")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(x: np.ndarray, y: np.ndarray) -> LinearFit:
    """Least squares line; r_squared is the squared correlation (0 for flat y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need equal-length inputs with at least 3 points")
    var_x = x.var()
    if var_x == 0:
        raise ValueError("zero variance in x")
    cov = np.mean((x - x.mean()) * (y - y.mean()))
    slope = cov / var_x
    intercept = y.mean() - slope * x.mean()
    var_y = y.var()
    r2 = 0.0 if var_y == 0 else float(cov * cov / (var_x * var_y))
    return LinearFit(float(slope), float(intercept), r2)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative (midranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required for AUROC")
    ranks = stats.rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision: sum of (R_k - R_{k-1}) * P_k over score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("at least one positive required for AUPRC")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # evaluate at the last index of each tied score block
    block_ends = np.flatnonzero(np.diff(sorted_scores) != 0)
    cut = np.append(block_ends, sorted_scores.size - 1)
    recall = tp[cut] / n_pos
    precision = tp[cut] / (tp[cut] + fp[cut])
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def sens_spec(
    scores: np.ndarray, labels: np.ndarray, threshold: float
) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    flagged = scores >= threshold
    tp = int(np.sum(flagged & (labels == 1)))
    fn = int(np.sum(~flagged & (labels == 1)))
    tn = int(np.sum(~flagged & (labels == 0)))
    fp = int(np.sum(flagged & (labels == 0)))
    if tp + fn == 0 or tn + fp == 0:
        raise ValueError("both classes required for sensitivity/specificity")
    return tp / (tp + fn), tn / (tn + fp)


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every unique score threshold, endpoints included."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    cut = np.append(np.flatnonzero(np.diff(sorted_scores) != 0), sorted_scores.size - 1)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required for a ROC curve")
    tpr = np.concatenate([[0.0], tp[cut] / n_pos])
    fpr = np.concatenate([[0.0], fp[cut] / n_neg])
    return fpr, tpr


def prc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at every unique score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("at least one positive required for a PRC curve")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    cut = np.append(np.flatnonzero(np.diff(sorted_scores) != 0), sorted_scores.size - 1)
    recall = tp[cut] / n_pos
    precision = tp[cut] / (tp[cut] + fp[cut])
    return recall, precision


@dataclass(frozen=True)
class RocSummary:
    auroc: float
    auprc: float
    sensitivity: float
    specificity: float
    threshold: float


def roc_summary(scores: np.ndarray, labels: np.ndarray, threshold: float) -> RocSummary:
    sens, spec = sens_spec(scores, labels, threshold)
    return RocSummary(auroc(scores, labels), auprc(scores, labels), sens, spec, threshold)


def moment_comparison(
    observed: Cohort | Sequence[np.ndarray],
    forecasted: Cohort | Sequence[np.ndarray],
    lags: Sequence[int] = (0, 1, 2, 3, 4, 5),
) -> dict[int, LinearFit | None]:
    """Fit forecasted moment coefficients against observed ones per lag.

    Lag 0 compares the upper-triangle cross-correlations (the diagonal is
    identically 1 on both sides); positive lags compare all (i, j)
    entries. Missing entries on either side are excluded; a lag with
    fewer than 3 usable entries maps to None.
    """
    _, obs_lag = empirical_moments(observed, lags)
    _, fc_lag = empirical_moments(forecasted, lags)
    fits: dict[int, LinearFit | None] = {}
    for lag in lags:
        obs_mat = obs_lag[lag]
        fc_mat = fc_lag[lag]
        if lag == 0:
            iu = np.triu_indices(obs_mat.shape[0], k=1)
            x, y = obs_mat[iu], fc_mat[iu]
        else:
            x, y = obs_mat.ravel(), fc_mat.ravel()
        ok = np.isfinite(x) & np.isfinite(y)
        if ok.sum() < 3 or x[ok].var() == 0:
            fits[lag] = None
        else:
            fits[lag] = linear_fit(x[ok], y[ok])
    return fits


@dataclass(frozen=True)
class EvalRecord:
    patient_id: str
    n_prior: int
    horizon: int
    score: float
    label: int


@dataclass
class HorizonGrid:
    n_values: list[int]
    m_values: list[int]
    cells: dict[tuple[int, int], RocSummary | None]


@dataclass
class CombinedEvalResult:
    grid: HorizonGrid
    per_horizon: dict[int, RocSummary | None]
    records: list[EvalRecord]
    #: (patient_id, n_prior) -> forecast mean trajectory, transformed space
    mean_trajectories: dict[tuple[str, int], np.ndarray]


def _maybe_summary(records: list[EvalRecord], threshold: float) -> RocSummary | None:
    labels = np.array([r.label for r in records])
    if records and 0 < labels.sum() < labels.size:
        scores = np.array([r.score for r in records])
        return roc_summary(scores, labels, threshold)
    return None


def combined_pipeline_eval(
    forecaster: ForecasterParams,
    annotator: AnnotatorParams,
    threshold: float,
    cohort: Cohort,
    lab_transform: PowerTransform,
    annot_transform: PowerTransform,
    gibbs: GibbsChainConfig,
    m_max: int = 5,
    n_range: tuple[int, int] | None = None,
    seed: int = 0,
    sfl_mode: str = "temporal",
) -> CombinedEvalResult:
    """Forecast-then-annotate evaluation over a validation cohort.

    For every patient and every usable history length n, the forecaster
    sees only the first n visits (raw values imputed upstream). The mean
    trajectory is inverted to raw space, spliced onto the observed
    prefix, re-featurized across the seam, annotated, and the probability
    at forecasted visit n+m is scored against the observed label there.
    """
    records: list[EvalRecord] = []
    mean_trajectories: dict[tuple[str, int], np.ndarray] = {}
    for patient in sorted(cohort.patients, key=lambda p: p.patient_id):
        raw = patient.lab_matrix()
        labels = patient.labels()
        total = raw.shape[0]
        transformed = apply_transform(lab_transform, raw)
        lo, hi = (1, total - 1) if n_range is None else n_range
        for n in range(max(1, lo), min(hi, total - 1) + 1):
            m_here = min(m_max, total - n)
            chain = GibbsChainConfig(
                steps=gibbs.steps,
                n_samples=gibbs.n_samples,
                seed=derive_seed(seed, "combined", patient.patient_id, n),
                init_at=gibbs.init_at,
            )
            dist = forecast_trajectory(forecaster, transformed[:n], m_here, chain)
            mean_trajectories[(patient.patient_id, n)] = dist.mean
            raw_forecast = invert_transform(lab_transform, dist.mean)
            seam = np.vstack([raw[:n], raw_forecast])
            feats = apply_transform(annot_transform, derive_feature_matrix(seam, sfl_mode))
            probs = annotate(annotator, feats)
            for m in range(1, m_here + 1):
                records.append(
                    EvalRecord(
                        patient.patient_id,
                        n,
                        m,
                        float(probs[n + m - 1]),
                        int(labels[n + m - 1]),
                    )
                )

    per_horizon: dict[int, RocSummary | None] = {}
    for m in range(1, m_max + 1):
        per_horizon[m] = _maybe_summary([r for r in records if r.horizon == m], threshold)

    n_values = sorted({r.n_prior for r in records})
    m_values = list(range(1, m_max + 1))
    cells: dict[tuple[int, int], RocSummary | None] = {}
    for n in n_values:
        for m in m_values:
            cells[(n, m)] = _maybe_summary(
                [r for r in records if r.n_prior == n and r.horizon == m], threshold
            )
    grid = HorizonGrid(n_values, m_values, cells)
    return CombinedEvalResult(grid, per_horizon, records, mean_trajectories)


def forecast_correlations(
    observed: Mapping[str, np.ndarray],
    mean_trajectories: Mapping[tuple[str, int], np.ndarray],
    m_max: int = 5,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature Pearson r of forecasts vs actuals at each horizon.

    Returns (absolute, delta) arrays of shape (n_features, m_max); the
    delta variant correlates changes relative to the last observed visit.
    Entries with too few pairs are NaN. Both sides are transformed-space.
    """
    first = next(iter(observed.values()))
    n_feat = first.shape[1]
    abs_r = np.full((n_feat, m_max), np.nan)
    delta_r = np.full((n_feat, m_max), np.nan)
    for m in range(1, m_max + 1):
        preds, actuals, pred_deltas, actual_deltas = [], [], [], []
        for (pid, n), traj in mean_trajectories.items():
            series = observed[pid]
            if traj.shape[0] < m or series.shape[0] < n + m:
                continue
            preds.append(traj[m - 1])
            actuals.append(series[n + m - 1])
            pred_deltas.append(traj[m - 1] - series[n - 1])
            actual_deltas.append(series[n + m - 1] - series[n - 1])
        if len(preds) < 3:
            continue
        p = np.stack(preds)
        a = np.stack(actuals)
        pd_ = np.stack(pred_deltas)
        ad = np.stack(actual_deltas)
        for j in range(n_feat):
            if p[:, j].std() > 0 and a[:, j].std() > 0:
                abs_r[j, m - 1] = pearson_r(p[:, j], a[:, j])
            if pd_[:, j].std() > 0 and ad[:, j].std() > 0:
                delta_r[j, m - 1] = pearson_r(pd_[:, j], ad[:, j])
    return abs_r, delta_r
