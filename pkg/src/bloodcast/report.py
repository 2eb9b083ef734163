"""SVG figures for a report bundle, generated only from its CSV files.

Re-running on an unchanged bundle reproduces byte-identical SVGs: the
figures read nothing but the CSVs, and matplotlib's hash salt and the
SVG date metadata are pinned.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "bloodcast"

import matplotlib.pyplot as plt
import numpy as np

from .cohort import FEATURES

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fold_dirs(out_dir: Path) -> list[Path]:
    return sorted(p for p in out_dir.glob("fold*") if p.is_dir())


def _plot_curves(out_dir: Path, fig_dir: Path) -> None:
    per_fold: dict[str, dict[str, list[tuple[float, float]]]] = defaultdict(dict)
    for fold_dir in _fold_dirs(out_dir):
        path = fold_dir / "curves.csv"
        if not path.exists():
            continue
        groups: dict[str, list[tuple[float, float]]] = defaultdict(list)
        for row in _read_csv(path):
            groups[row["curve"]].append((float(row["x"]), float(row["y"])))
        per_fold[fold_dir.name] = groups

    if not per_fold:
        return

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for name, groups in sorted(per_fold.items()):
        if "roc" in groups:
            xs, ys = zip(*groups["roc"])
            axes[0].plot(xs, ys, alpha=0.7, label=name)
        if "prc" in groups:
            xs, ys = zip(*groups["prc"])
            axes[1].plot(xs, ys, alpha=0.7, label=name)
    axes[0].plot([0, 1], [0, 1], "k:", lw=0.8)
    axes[0].set(xlabel="false positive rate", ylabel="true positive rate", title="Annotator ROC")
    axes[1].set(xlabel="recall", ylabel="precision", title="Annotator PRC")
    first = next(iter(sorted(per_fold.values())), {})
    for beta in range(1, 6):
        key = f"fbeta{beta}"
        if key in first:
            xs, ys = zip(*sorted(first[key]))
            axes[2].plot(xs, ys, label=f"beta={beta}")
    axes[2].set(xlabel="decision threshold", ylabel="F-beta", title="F-beta vs threshold (fold0)")
    axes[2].legend(fontsize=7)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(fig_dir / "annotator_curves.svg", **_SAVE_KW)
    plt.close(fig)


def _plot_heatmaps(out_dir: Path, fig_dir: Path) -> None:
    sums: dict[str, dict[tuple[int, int], list[float]]] = {
        m: defaultdict(list) for m in ("auroc", "auprc", "sensitivity", "specificity")
    }
    for fold_dir in _fold_dirs(out_dir):
        path = fold_dir / "grid.csv"
        if not path.exists():
            continue
        for row in _read_csv(path):
            for metric in sums:
                if row[metric] != "":
                    sums[metric][(int(row["n_prior"]), int(row["horizon"]))].append(float(row[metric]))
    if not any(sums.values()):
        return
    n_values = sorted({n for cells in sums.values() for (n, _) in cells})
    m_values = sorted({m for cells in sums.values() for (_, m) in cells})
    if not n_values or not m_values:
        return
    fig, axes = plt.subplots(1, 4, figsize=(16, 4))
    for ax, metric in zip(axes, sums):
        grid = np.full((len(n_values), len(m_values)), np.nan)
        for (n, m), values in sums[metric].items():
            grid[n_values.index(n), m_values.index(m)] = float(np.mean(values))
        im = ax.imshow(grid, aspect="auto", origin="lower", cmap="viridis")
        ax.set(
            title=metric,
            xlabel="forecast horizon (steps)",
            ylabel="prior observations",
            xticks=range(len(m_values)),
            xticklabels=m_values,
        )
        step = max(1, len(n_values) // 10)
        ax.set_yticks(range(0, len(n_values), step))
        ax.set_yticklabels(n_values[::step])
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(fig_dir / "combined_heatmaps.svg", **_SAVE_KW)
    plt.close(fig)


def _plot_moments(out_dir: Path, fig_dir: Path) -> None:
    series: dict[str, dict[int, float]] = {}
    for fold_dir in _fold_dirs(out_dir):
        path = fold_dir / "metrics.csv"
        if not path.exists():
            continue
        for row in _read_csv(path):
            if row["metric"] == "moment_r2":
                series.setdefault(fold_dir.name, {})[int(row["horizon"])] = float(row["value"])
    if not series:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, values in sorted(series.items()):
        lags = sorted(values)
        ax.plot(lags, [values[lag] for lag in lags], marker="o", alpha=0.8, label=name)
    ax.set(xlabel="lag (steps)", ylabel="R^2", title="Forecast vs observed moment fits")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(fig_dir / "moment_fits.svg", **_SAVE_KW)
    plt.close(fig)


def _plot_trajectory(out_dir: Path, fig_dir: Path) -> None:
    for fold_dir in _fold_dirs(out_dir):
        path = fold_dir / "trajectory_example.csv"
        if not path.exists():
            continue
        rows = _read_csv(path)
        by_feature: dict[str, list[dict[str, str]]] = defaultdict(list)
        for row in rows:
            by_feature[row["feature"]].append(row)
        fig, axes = plt.subplots(2, 5, figsize=(16, 6))
        for ax, name in zip(axes.ravel(), FEATURES):
            data = by_feature.get(name, [])
            t = [int(r["visit_index"]) for r in data]
            actual = [float(r["actual"]) for r in data]
            ax.plot(t, actual, "o", ms=3, label="observed")
            fc = [(int(r["visit_index"]), float(r["mean"]), float(r["lo95"]), float(r["hi95"]))
                  for r in data if r["mean"] != ""]
            if fc:
                ft, fm, flo, fhi = zip(*fc)
                ax.plot(ft, fm, "x--", ms=4, label="forecast")
                ax.fill_between(ft, flo, fhi, alpha=0.25, color="grey")
            ax.set_title(name, fontsize=9)
        axes[0, 0].legend(fontsize=7)
        fig.suptitle(f"Forecast sleeves ({fold_dir.name}, {rows[0]['patient_id']})")
        fig.tight_layout()
        fig.savefig(fig_dir / "trajectory_sleeves.svg", **_SAVE_KW)
        plt.close(fig)
        return


def _plot_qq(out_dir: Path, fig_dir: Path) -> None:
    for fold_dir in _fold_dirs(out_dir):
        path = fold_dir / "qq.csv"
        if not path.exists():
            continue
        rows = _read_csv(path)
        fig, axes = plt.subplots(2, 5, figsize=(16, 6))
        for ax, name in zip(axes.ravel(), FEATURES):
            for split, color in (("train", "C0"), ("val", "C1")):
                pts = [
                    (float(r["theoretical"]), float(r["sample"]))
                    for r in rows
                    if r["feature"] == name and r["split"] == split
                ]
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, ".", ms=2, color=color, label=split)
            lim = ax.get_xlim()
            ax.plot(lim, lim, "k:", lw=0.8)
            ax.set_title(name, fontsize=9)
        axes[0, 0].legend(fontsize=7)
        fig.suptitle(f"QQ of transformed features ({fold_dir.name})")
        fig.tight_layout()
        fig.savefig(fig_dir / "qq_grid.svg", **_SAVE_KW)
        plt.close(fig)
        return


def emit_report(out_dir: str | Path) -> list[Path]:
    """(Re)generate every figure from the bundle's CSVs; idempotent."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"{out_dir} is not a directory")
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    _plot_curves(out_dir, fig_dir)
    _plot_heatmaps(out_dir, fig_dir)
    _plot_moments(out_dir, fig_dir)
    _plot_trajectory(out_dir, fig_dir)
    _plot_qq(out_dir, fig_dir)
    return sorted(fig_dir.glob("*.svg"))
