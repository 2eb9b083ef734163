"""Cross-validated experiment orchestration and the report bundle.

``run_cv`` drives the full loop per fold: fit the power transform on
training patients only, train both models, calibrate the decision
threshold on training scores, then evaluate the annotator, the combined
forecast-then-annotate pipeline, and the forecast moment fits on the
untouched validation fold. Folds are independent; a failing fold is
recorded and the others proceed.

Everything stochastic draws from per-(stage, fold) seeds derived from
the run seed, so any stage can be reproduced in isolation and no
training stream ever touches validation data.
"""
from __future__ import annotations

import csv
import json
import platform
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .annotator import (
    ANNOTATION_FEATURES,
    AnnotatorParams,
    ThresholdCalibration,
    calibrate_threshold,
    derive_features,
    fbeta_score,
    score_sequences,
    train_annotator,
)
from .cohort import (
    FEATURES,
    Cohort,
    FoldAssignment,
    load_cohort,
    split_folds,
)
from .config import RunConfig
from .crbm import GibbsChainConfig
from .forecaster import ForecasterParams, forecast_trajectory, train_forecaster
from .metrics import (
    CombinedEvalResult,
    LinearFit,
    RocSummary,
    combined_pipeline_eval,
    forecast_correlations,
    moment_comparison,
    prc_curve,
    roc_curve,
    roc_summary,
)
from .preprocess import (
    PowerTransform,
    apply_transform,
    fit_power_transform,
    impute_cohort,
    invert_transform,
    qq_points,
)
from .seeds import derive_seed
from .synth import generate

MOMENT_LAGS = (0, 1, 2, 3, 4, 5)


@dataclass
class TrainedFold:
    fold: int
    forecaster: ForecasterParams
    annotator: AnnotatorParams
    lab_transform: PowerTransform
    annot_transform: PowerTransform
    calibration: ThresholdCalibration


@dataclass
class FoldEval:
    fold: int
    annotator_summary: RocSummary
    combined: CombinedEvalResult
    moment_fits: dict[int, LinearFit | None]
    abs_r: np.ndarray  # (10, m_max)
    delta_r: np.ndarray
    val_scores: np.ndarray
    val_labels: np.ndarray


@dataclass
class ReportBundle:
    out_dir: Path
    folds: list[int]
    statuses: dict[int, str]
    trained: dict[int, TrainedFold]
    evals: dict[int, FoldEval]


def prepare_cohort(config: RunConfig) -> Cohort:
    """Materialize the raw labeled cohort from a CSV path or the generator."""
    if config.cohort_path is not None:
        cohort, _ = load_cohort(config.cohort_path)
        return cohort
    cohort, _ = generate(config.synth)
    return cohort


def _annotation_sequences(
    patients, annot_transform: PowerTransform | None, sfl_mode: str
):
    """(features, labels) pairs; fits nothing, applies a given transform."""
    out = []
    for patient in patients:
        feats = derive_features(patient, sfl_mode)
        if annot_transform is not None:
            feats = apply_transform(annot_transform, feats)
        out.append((feats, patient.labels()))
    return out


def train_fold(
    imputed: Cohort, folds: FoldAssignment, fold: int, config: RunConfig
) -> TrainedFold:
    """Fit transforms, both models and the threshold from training patients only."""
    train_patients = [imputed.get(pid) for pid in folds.train_ids(fold)]

    lab_transform = fit_power_transform(
        np.concatenate([p.lab_matrix() for p in train_patients])
    )
    train_sequences = [
        (p.patient_id, apply_transform(lab_transform, p.lab_matrix()))
        for p in train_patients
    ]
    fc_config = replace(config.forecaster_train, seed=derive_seed(config.seed, "forecaster", fold))
    fc_params = train_forecaster(train_sequences, fc_config)

    raw_features = [derive_features(p, config.sfl_mode) for p in train_patients]
    annot_transform = fit_power_transform(
        np.concatenate(raw_features), ANNOTATION_FEATURES
    )
    train_feature_sequences = [
        (apply_transform(annot_transform, feats), p.labels())
        for feats, p in zip(raw_features, train_patients)
    ]
    an_config = replace(config.annotator_train, seed=derive_seed(config.seed, "annotator", fold))
    an_params = train_annotator(train_feature_sequences, an_config)

    train_scores, train_labels = score_sequences(an_params, train_feature_sequences)
    calibration = calibrate_threshold(train_scores, train_labels, config.beta)

    return TrainedFold(fold, fc_params, an_params, lab_transform, annot_transform, calibration)


def evaluate_fold(
    imputed: Cohort, folds: FoldAssignment, fold: int, config: RunConfig, trained: TrainedFold
) -> FoldEval:
    """All validation-fold metrics for one set of trained artifacts."""
    val_patients = [imputed.get(pid) for pid in folds.fold_ids(fold)]
    val_cohort = Cohort(val_patients, imputed.provenance)

    val_feature_sequences = _annotation_sequences(
        val_patients, trained.annot_transform, config.sfl_mode
    )
    val_scores, val_labels = score_sequences(trained.annotator, val_feature_sequences)
    annot_summary = roc_summary(val_scores, val_labels, trained.calibration.threshold)

    n_range = None if config.eval_n_max is None else (1, config.eval_n_max)
    combined = combined_pipeline_eval(
        trained.forecaster,
        trained.annotator,
        trained.calibration.threshold,
        val_cohort,
        trained.lab_transform,
        trained.annot_transform,
        config.eval_gibbs,
        m_max=config.eval_m_max,
        n_range=n_range,
        seed=derive_seed(config.seed, "eval", fold),
        sfl_mode=config.sfl_mode,
    )

    # 1-step forecast series vs the observed targets they predict
    observed_transformed = {
        p.patient_id: apply_transform(trained.lab_transform, p.lab_matrix())
        for p in val_patients
    }
    observed_targets = []
    forecast_series = []
    for pid in sorted(observed_transformed):
        series = observed_transformed[pid]
        steps = [
            combined.mean_trajectories[(pid, n)][0]
            for n in range(1, series.shape[0])
            if (pid, n) in combined.mean_trajectories
        ]
        if len(steps) >= 2:
            forecast_series.append(np.stack(steps))
            observed_targets.append(series[1 : len(steps) + 1])
    moment_fits = moment_comparison(observed_targets, forecast_series, MOMENT_LAGS)

    abs_r, delta_r = forecast_correlations(
        observed_transformed, combined.mean_trajectories, config.eval_m_max
    )
    return FoldEval(fold, annot_summary, combined, moment_fits, abs_r, delta_r, val_scores, val_labels)


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(tuple(header))
        writer.writerows(rows)


def fold_metric_rows(fold: int, ev: FoldEval, calibration: ThresholdCalibration) -> list[tuple]:
    """Long-format rows (metric, fold, horizon, n_prior, value)."""
    rows: list[tuple] = []

    def add(metric: str, value: float, horizon="", n_prior="") -> None:
        rows.append((metric, fold, horizon, n_prior, _fmt(value)))

    add("annotator_auroc", ev.annotator_summary.auroc)
    add("annotator_auprc", ev.annotator_summary.auprc)
    add("annotator_sensitivity", ev.annotator_summary.sensitivity)
    add("annotator_specificity", ev.annotator_summary.specificity)
    add("threshold", calibration.threshold)
    add("train_fbeta", calibration.achieved_fbeta)
    for m, summary in sorted(ev.combined.per_horizon.items()):
        if summary is None:
            continue
        add("combined_auroc", summary.auroc, horizon=m)
        add("combined_auprc", summary.auprc, horizon=m)
        add("combined_sensitivity", summary.sensitivity, horizon=m)
        add("combined_specificity", summary.specificity, horizon=m)
    for (n, m), cell in sorted(ev.combined.grid.cells.items()):
        if cell is None:
            continue
        add("grid_auroc", cell.auroc, horizon=m, n_prior=n)
        add("grid_auprc", cell.auprc, horizon=m, n_prior=n)
        add("grid_sensitivity", cell.sensitivity, horizon=m, n_prior=n)
        add("grid_specificity", cell.specificity, horizon=m, n_prior=n)
    for lag, fit in sorted(ev.moment_fits.items()):
        if fit is None:
            continue
        add("moment_r2", fit.r_squared, horizon=lag)
        add("moment_slope", fit.slope, horizon=lag)
        add("moment_intercept", fit.intercept, horizon=lag)
    return rows


def _write_fold_outputs(
    fold_dir: Path, config: RunConfig, imputed: Cohort, folds: FoldAssignment,
    trained: TrainedFold, ev: FoldEval,
) -> None:
    fold_dir.mkdir(parents=True, exist_ok=True)
    trained.forecaster.save(fold_dir / "forecaster")
    trained.annotator.save(fold_dir / "annotator")
    trained.lab_transform.save_csv(fold_dir / "transform_labs.csv")
    trained.annot_transform.save_csv(fold_dir / "transform_annot.csv")
    trained.calibration.save_csv(fold_dir / "threshold.csv")

    _write_csv(
        fold_dir / "metrics.csv",
        ("metric", "fold", "horizon", "n_prior", "value"),
        fold_metric_rows(ev.fold, ev, trained.calibration),
    )

    # curves behind the ROC / PRC / F-beta figures
    curve_rows: list[tuple] = []
    fpr, tpr = roc_curve(ev.val_scores, ev.val_labels)
    curve_rows += [("roc", _fmt(x), _fmt(y)) for x, y in zip(fpr, tpr)]
    recall, precision = prc_curve(ev.val_scores, ev.val_labels)
    curve_rows += [("prc", _fmt(x), _fmt(y)) for x, y in zip(recall, precision)]
    for beta in range(1, 6):
        for thr, precision_t, recall_t, _ in trained.calibration.curve:
            curve_rows.append(
                (f"fbeta{beta}", _fmt(thr), _fmt(fbeta_score(precision_t, recall_t, float(beta))))
            )
    _write_csv(fold_dir / "curves.csv", ("curve", "x", "y"), curve_rows)

    # combined-eval instance table and grid
    _write_csv(
        fold_dir / "combined_records.csv",
        ("patient_id", "n_prior", "horizon", "score", "label"),
        [(r.patient_id, r.n_prior, r.horizon, _fmt(r.score), r.label) for r in ev.combined.records],
    )
    grid_rows = []
    for (n, m), cell in sorted(ev.combined.grid.cells.items()):
        if cell is None:
            grid_rows.append((n, m, "", "", "", ""))
        else:
            grid_rows.append(
                (n, m, _fmt(cell.auroc), _fmt(cell.auprc), _fmt(cell.sensitivity), _fmt(cell.specificity))
            )
    _write_csv(
        fold_dir / "grid.csv",
        ("n_prior", "horizon", "auroc", "auprc", "sensitivity", "specificity"),
        grid_rows,
    )

    feature_rows = []
    for j, name in enumerate(FEATURES):
        for m in range(1, config.eval_m_max + 1):
            for kind, table in (("absolute", ev.abs_r), ("delta", ev.delta_r)):
                value = table[j, m - 1]
                if np.isfinite(value):
                    feature_rows.append((name, m, kind, _fmt(value)))
    _write_csv(
        fold_dir / "feature_correlations.csv",
        ("feature", "horizon", "kind", "r"),
        feature_rows,
    )

    # QQ diagnostics of the transformed columns (quantile grid keeps files small)
    qq_rows = []
    train_matrix = np.concatenate(
        [apply_transform(trained.lab_transform, imputed.get(pid).lab_matrix())
         for pid in folds.train_ids(ev.fold)]
    )
    val_matrix = np.concatenate(
        [apply_transform(trained.lab_transform, imputed.get(pid).lab_matrix())
         for pid in folds.fold_ids(ev.fold)]
    )
    for split, matrix in (("train", train_matrix), ("val", val_matrix)):
        for j, name in enumerate(FEATURES):
            theo, sample = qq_points(matrix[:, j])
            idx = np.linspace(0, theo.size - 1, min(99, theo.size)).astype(int)
            qq_rows += [
                (split, name, _fmt(theo[i]), _fmt(sample[i])) for i in idx
            ]
    _write_csv(fold_dir / "qq.csv", ("split", "feature", "theoretical", "sample"), qq_rows)

    _write_trajectory_example(fold_dir, config, imputed, folds, trained, ev.fold)


def _write_trajectory_example(
    fold_dir: Path, config: RunConfig, imputed: Cohort, folds: FoldAssignment,
    trained: TrainedFold, fold: int,
) -> None:
    """Sleeve data for one validation patient: 7 observed, 5 forecast steps."""
    history_len, horizon = 7, 5
    candidates = [
        imputed.get(pid)
        for pid in folds.fold_ids(fold)
        if len(imputed.get(pid).visits) >= history_len + horizon
    ]
    if not candidates:
        return
    patient = candidates[0]
    raw = patient.lab_matrix()
    transformed = apply_transform(trained.lab_transform, raw)
    chain = GibbsChainConfig(
        steps=config.gibbs.steps,
        n_samples=config.gibbs.n_samples,
        seed=derive_seed(config.seed, "trajectory-example", fold),
    )
    dist = forecast_trajectory(trained.forecaster, transformed[:history_len], horizon, chain)
    mean_raw = invert_transform(trained.lab_transform, dist.mean)
    lo_raw = invert_transform(trained.lab_transform, dist.lo95)
    hi_raw = invert_transform(trained.lab_transform, dist.hi95)
    rows = []
    total = history_len + horizon
    for j, name in enumerate(FEATURES):
        for t in range(total):
            actual = _fmt(raw[t, j])
            if t < history_len:
                rows.append((patient.patient_id, name, t, actual, "", "", ""))
            else:
                s = t - history_len
                rows.append(
                    (patient.patient_id, name, t, actual,
                     _fmt(mean_raw[s, j]), _fmt(lo_raw[s, j]), _fmt(hi_raw[s, j]))
                )
    _write_csv(
        fold_dir / "trajectory_example.csv",
        ("patient_id", "feature", "visit_index", "actual", "mean", "lo95", "hi95"),
        rows,
    )


def _aggregate(out_dir: Path, all_rows: list[tuple]) -> None:
    groups: dict[tuple, list[float]] = {}
    for metric, _fold, horizon, n_prior, value in all_rows:
        groups.setdefault((metric, horizon, n_prior), []).append(float(value))
    rows = []
    for (metric, horizon, n_prior), values in sorted(groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), str(kv[0][2]))):
        arr = np.array(values)
        rows.append((metric, horizon, n_prior, _fmt(arr.mean()), _fmt(arr.std(ddof=1) if arr.size > 1 else 0.0)))
    _write_csv(out_dir / "aggregate.csv", ("metric", "horizon", "n_prior", "mean", "sd"), rows)


def run_cv(config: RunConfig, out_dir: str | Path) -> ReportBundle:
    """Run the full cross-validated experiment and write the report bundle."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    cohort = prepare_cohort(config)
    imputed = impute_cohort(cohort)
    folds = split_folds(cohort, config.k, derive_seed(config.seed, "folds"))

    statuses: dict[int, str] = {}
    trained_by_fold: dict[int, TrainedFold] = {}
    evals: dict[int, FoldEval] = {}
    all_rows: list[tuple] = []
    for fold in range(config.k):
        try:
            trained = train_fold(imputed, folds, fold, config)
            ev = evaluate_fold(imputed, folds, fold, config, trained)
            _write_fold_outputs(out_dir / f"fold{fold}", config, imputed, folds, trained, ev)
            all_rows.extend(fold_metric_rows(fold, ev, trained.calibration))
            trained_by_fold[fold] = trained
            evals[fold] = ev
            statuses[fold] = "ok"
        except Exception as exc:  # keep remaining folds alive
            statuses[fold] = f"error: {exc}"

    _write_csv(
        out_dir / "metrics.csv", ("metric", "fold", "horizon", "n_prior", "value"), all_rows
    )
    _aggregate(out_dir, all_rows)

    from .config import config_echo

    manifest = {
        "bloodcast_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config_echo(config),
        "stage_seeds": {
            "folds": derive_seed(config.seed, "folds"),
            **{
                f"forecaster/fold{f}": derive_seed(config.seed, "forecaster", f)
                for f in range(config.k)
            },
            **{
                f"annotator/fold{f}": derive_seed(config.seed, "annotator", f)
                for f in range(config.k)
            },
            **{f"eval/fold{f}": derive_seed(config.seed, "eval", f) for f in range(config.k)},
        },
        "fold_patients": {str(f): folds.fold_ids(f) for f in range(config.k)},
        "fold_status": {str(f): statuses[f] for f in range(config.k)},
        "wall_time_seconds": round(time.time() - started, 3),
        "argv": sys.argv,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    from .report import emit_report

    emit_report(out_dir)
    return ReportBundle(out_dir, list(range(config.k)), statuses, trained_by_fold, evals)
