"""Imputation and feature-wise power transformation to near-Gaussian.

Missing values are filled last-observation-carried-forward, with the
earliest available measurement carried backward over leading gaps; no
cross-patient information is used. Each feature is then Yeo-Johnson
transformed (lambda chosen by maximum likelihood on training rows only)
and standardized to zero mean, unit sd on the training column.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .cohort import FEATURES, Cohort, CohortError, LabPanel, PatientRecord, Visit

LAMBDA_BOUNDS = (-5.0, 5.0)
LAMBDA_TOL = 1e-6


def impute_locf(record: PatientRecord) -> PatientRecord:
    """Fill gaps forward in time; leading gaps take the earliest value."""
    matrix = record.lab_matrix()
    n_visits, n_feat = matrix.shape
    for j in range(n_feat):
        col = matrix[:, j]
        observed = np.flatnonzero(~np.isnan(col))
        if observed.size == 0:
            raise CohortError(
                f"patient {record.patient_id}: {FEATURES[j]} never measured"
            )
        # backward-carry the earliest measurement, then forward fill
        col[: observed[0]] = col[observed[0]]
        for t in range(1, n_visits):
            if np.isnan(col[t]):
                col[t] = col[t - 1]
    visits = [
        Visit(v.visit_index, LabPanel.from_array(matrix[t]), v.pd_label)
        for t, v in enumerate(record.visits)
    ]
    return PatientRecord(record.patient_id, visits)


def impute_cohort(cohort: Cohort) -> Cohort:
    return Cohort([impute_locf(p) for p in cohort.patients], cohort.provenance)


def yeo_johnson(x: np.ndarray, lam: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    if abs(lam) < 1e-12:
        out[pos] = np.log1p(x[pos])
    else:
        out[pos] = (np.power(x[pos] + 1.0, lam) - 1.0) / lam
    if abs(lam - 2.0) < 1e-12:
        out[~pos] = -np.log1p(-x[~pos])
    else:
        out[~pos] = -(np.power(1.0 - x[~pos], 2.0 - lam) - 1.0) / (2.0 - lam)
    return out


def yeo_johnson_inverse(y: np.ndarray, lam: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0
    if abs(lam) < 1e-12:
        out[pos] = np.expm1(y[pos])
    else:
        out[pos] = np.power(lam * y[pos] + 1.0, 1.0 / lam) - 1.0
    if abs(lam - 2.0) < 1e-12:
        out[~pos] = -np.expm1(-y[~pos])
    else:
        out[~pos] = 1.0 - np.power(1.0 - (2.0 - lam) * y[~pos], 1.0 / (2.0 - lam))
    return out


def yj_log_likelihood(x: np.ndarray, lam: float) -> float:
    """Profile log-likelihood of the Yeo-Johnson model at ``lam``."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        psi = yeo_johnson(x, lam)
        if not np.all(np.isfinite(psi)):
            return -np.inf
        var = psi.var()
        if var <= 0 or not np.isfinite(var):
            return -np.inf
        jacobian = (lam - 1.0) * np.sum(np.sign(x) * np.log1p(np.abs(x)))
        return float(-0.5 * x.size * np.log(var) + jacobian)


def _fit_lambda(column: np.ndarray) -> float:
    result = optimize.minimize_scalar(
        lambda lam: -yj_log_likelihood(column, lam),
        bounds=LAMBDA_BOUNDS,
        method="bounded",
        options={"xatol": LAMBDA_TOL},
    )
    return float(result.x)


@dataclass
class PowerTransform:
    """Per-feature lambda plus post-transform standardization constants."""

    features: tuple[str, ...]
    lambdas: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self) -> None:
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sds = np.asarray(self.sds, dtype=np.float64)
        n = len(self.features)
        if not (self.lambdas.shape == self.means.shape == self.sds.shape == (n,)):
            raise CohortError("transform parameter shapes do not match feature count")
        if np.any(self.sds <= 0):
            raise CohortError("transform sd must be > 0 for every feature")

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("feature", "lambda", "mean", "sd"))
            for i, name in enumerate(self.features):
                writer.writerow(
                    (name, repr(float(self.lambdas[i])), repr(float(self.means[i])), repr(float(self.sds[i])))
                )

    @classmethod
    def load_csv(cls, path: str | Path) -> "PowerTransform":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["feature", "lambda", "mean", "sd"]:
                raise CohortError(f"{path}: bad transform header")
            rows = list(reader)
        return cls(
            features=tuple(r[0] for r in rows),
            lambdas=np.array([float(r[1]) for r in rows]),
            means=np.array([float(r[2]) for r in rows]),
            sds=np.array([float(r[3]) for r in rows]),
        )


def fit_power_transform(
    train_matrix: np.ndarray, features: Sequence[str] = FEATURES
) -> PowerTransform:
    """Fit per-feature Yeo-Johnson lambdas and standardization on training rows."""
    matrix = np.asarray(train_matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(features):
        raise CohortError(f"expected (N, {len(features)}) training matrix")
    if matrix.shape[0] < 10:
        raise CohortError(f"need >= 10 training rows, got {matrix.shape[0]}")
    if np.isnan(matrix).any():
        raise CohortError("training matrix contains missing values, impute first")
    lambdas = np.empty(len(features))
    means = np.empty(len(features))
    sds = np.empty(len(features))
    for j, name in enumerate(features):
        col = matrix[:, j]
        if col.std() == 0:
            raise CohortError(f"feature {name} has zero variance")
        lambdas[j] = _fit_lambda(col)
        transformed = yeo_johnson(col, lambdas[j])
        means[j] = transformed.mean()
        sds[j] = transformed.std()
    return PowerTransform(tuple(features), lambdas, means, sds)


def apply_transform(params: PowerTransform, values: np.ndarray) -> np.ndarray:
    """Power-transform then standardize; last axis must index features."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for j in range(len(params.features)):
        out[..., j] = (yeo_johnson(values[..., j], params.lambdas[j]) - params.means[j]) / params.sds[j]
    return out


def invert_transform(params: PowerTransform, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for j in range(len(params.features)):
        out[..., j] = yeo_johnson_inverse(
            values[..., j] * params.sds[j] + params.means[j], params.lambdas[j]
        )
    return out


def qq_points(column: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample quantiles at plotting positions (i - 0.5)/n vs normal quantiles."""
    column = np.asarray(column, dtype=np.float64)
    if column.size < 2:
        raise CohortError("need at least 2 values for QQ points")
    sample = np.sort(column)
    positions = (np.arange(1, sample.size + 1) - 0.5) / sample.size
    return stats.norm.ppf(positions), sample
