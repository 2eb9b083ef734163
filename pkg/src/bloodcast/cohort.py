"""Patient/visit data model, cohort CSV ingestion, grid alignment and CV folds.

A cohort is a list of patients, each an ordered sequence of visits on a
nominal 3-month follow-up grid. Ten blood-work features are tracked per
visit; progression labels are ingested, never computed here.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeds import rng_for

#: Canonical feature order, matching the cohort CSV column order.
FEATURES = (
    "hb",
    "ca",
    "cr",
    "ldh",
    "alb",
    "b2m",
    "mpr",
    "sfl_kappa",
    "sfl_lambda",
    "wbc",
)
N_FEATURES = len(FEATURES)

CSV_HEADER = ("patient_id", "visit_index", *FEATURES, "pd_label")

#: Days per nominal 3-month follow-up step.
GRID_DAYS = 91.3


class CohortError(ValueError):
    """Malformed or inconsistent cohort data."""


@dataclass(frozen=True)
class LabPanel:
    """One visit's blood work. ``None`` marks a missing measurement."""

    hb: float | None = None
    ca: float | None = None
    cr: float | None = None
    ldh: float | None = None
    alb: float | None = None
    b2m: float | None = None
    mpr: float | None = None
    sfl_kappa: float | None = None
    sfl_lambda: float | None = None
    wbc: float | None = None

    def as_array(self) -> np.ndarray:
        """Values in canonical order, NaN where missing."""
        return np.array(
            [math.nan if getattr(self, f) is None else float(getattr(self, f)) for f in FEATURES],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "LabPanel":
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (N_FEATURES,):
            raise CohortError(f"expected {N_FEATURES} lab values, got shape {vals.shape}")
        return cls(**{f: (None if np.isnan(v) else float(v)) for f, v in zip(FEATURES, vals)})

    def is_complete(self) -> bool:
        return all(getattr(self, f) is not None for f in FEATURES)


@dataclass(frozen=True)
class Visit:
    visit_index: int
    labs: LabPanel
    pd_label: bool | None = None


@dataclass
class PatientRecord:
    patient_id: str
    visits: list[Visit]

    def lab_matrix(self) -> np.ndarray:
        """(T, 10) matrix of lab values, NaN where missing."""
        return np.stack([v.labs.as_array() for v in self.visits])

    def labels(self) -> np.ndarray:
        """(T,) int labels; raises if any visit is unlabeled."""
        out = np.empty(len(self.visits), dtype=np.int64)
        for i, v in enumerate(self.visits):
            if v.pd_label is None:
                raise CohortError(f"patient {self.patient_id}: visit {v.visit_index} has no pd_label")
            out[i] = int(v.pd_label)
        return out

    def has_labels(self) -> bool:
        return all(v.pd_label is not None for v in self.visits)

    def validate(self) -> None:
        if len(self.visits) < 2:
            raise CohortError(f"patient {self.patient_id}: fewer than 2 visits")
        idx = [v.visit_index for v in self.visits]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise CohortError(f"patient {self.patient_id}: visit_index not strictly increasing")
        mat = self.lab_matrix()
        never = np.all(np.isnan(mat), axis=0)
        if never.any():
            missing = [FEATURES[i] for i in np.flatnonzero(never)]
            raise CohortError(f"patient {self.patient_id}: never measured: {','.join(missing)}")


@dataclass
class Cohort:
    patients: list[PatientRecord]
    provenance: str = "ingested"

    def __post_init__(self) -> None:
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate patient_id in cohort")

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def get(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        return Cohort([p for p in self.patients if p.patient_id in wanted], self.provenance)

    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)


@dataclass(frozen=True)
class Exclusion:
    patient_id: str
    reason: str


@dataclass
class FoldAssignment:
    k: int
    assignment: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f != fold)

    def validate(self, cohort: Cohort) -> None:
        ids = set(cohort.patient_ids())
        if set(self.assignment) != ids:
            raise CohortError("fold assignment does not cover the cohort exactly")
        sizes = [len(self.fold_ids(f)) for f in range(self.k)]
        if max(sizes) - min(sizes) > 1:
            raise CohortError(f"fold sizes unbalanced: {sizes}")


def _parse_cell(text: str, line_no: int, col: str) -> float | None:
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise CohortError(f"line {line_no}: bad value {text!r} in column {col}") from exc
    if not math.isfinite(value):
        raise CohortError(f"line {line_no}: non-finite value in column {col}")
    return value


def load_cohort(path: str | Path) -> tuple[Cohort, list[Exclusion]]:
    """Load the wide cohort CSV.

    Visits are sorted by visit_index; duplicate (patient, visit_index)
    rows keep the last occurrence; patients with a never-measured feature
    are dropped and reported in the exclusion list.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortError(f"{path}: empty file") from None
        if tuple(header) != CSV_HEADER:
            raise CohortError(f"{path}: header mismatch, expected {','.join(CSV_HEADER)}")
        # patient -> visit_index -> (labs, label); insertion order preserved
        rows: dict[str, dict[int, tuple[LabPanel, bool | None]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise CohortError(f"line {line_no}: expected {len(CSV_HEADER)} columns, got {len(row)}")
            pid = row[0]
            if pid == "":
                raise CohortError(f"line {line_no}: empty patient_id")
            try:
                vidx = int(row[1])
            except ValueError as exc:
                raise CohortError(f"line {line_no}: bad visit_index {row[1]!r}") from exc
            if vidx < 0:
                raise CohortError(f"line {line_no}: negative visit_index")
            labs = {}
            for col, text in zip(FEATURES, row[2:12]):
                value = _parse_cell(text, line_no, col)
                if value is not None and value < 0:
                    raise CohortError(f"line {line_no}: negative {col} value {value}")
                labs[col] = value
            label_text = row[12]
            if label_text == "":
                label: bool | None = None
            elif label_text in ("0", "1"):
                label = label_text == "1"
            else:
                raise CohortError(f"line {line_no}: pd_label must be 0, 1 or empty, got {label_text!r}")
            rows.setdefault(pid, {})[vidx] = (LabPanel(**labs), label)

    if not rows:
        raise CohortError(f"{path}: no data rows")

    patients: list[PatientRecord] = []
    exclusions: list[Exclusion] = []
    for pid, visits_by_idx in rows.items():
        visits = [
            Visit(vidx, labs, label)
            for vidx, (labs, label) in sorted(visits_by_idx.items())
        ]
        record = PatientRecord(pid, visits)
        if len(visits) < 2:
            exclusions.append(Exclusion(pid, "fewer than 2 visits"))
            continue
        never = np.all(np.isnan(record.lab_matrix()), axis=0)
        if never.any():
            names = ",".join(FEATURES[i] for i in np.flatnonzero(never))
            exclusions.append(Exclusion(pid, f"never measured: {names}"))
            continue
        patients.append(record)
    return Cohort(patients, provenance="ingested"), exclusions


def _format_value(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write the wide CSV; floats use shortest round-trip formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for patient in cohort.patients:
            for visit in patient.visits:
                row = [patient.patient_id, str(visit.visit_index)]
                row += [_format_value(getattr(visit.labs, f)) for f in FEATURES]
                row.append("" if visit.pd_label is None else str(int(visit.pd_label)))
                writer.writerow(row)


def write_exclusions(exclusions: Sequence[Exclusion], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("patient_id", "reason"))
        for exc in exclusions:
            writer.writerow((exc.patient_id, exc.reason))


def align_visits(
    raw_visits: Sequence[tuple],
) -> list[Visit]:
    """Snap (day_offset, labs[, pd_label]) tuples onto the 3-month grid.

    visit_index = day_offset / GRID_DAYS rounded half-up; when two raw
    visits collide on one grid point the later one wins.
    """
    by_index: dict[int, tuple[float, LabPanel, bool | None]] = {}
    for item in raw_visits:
        if len(item) == 2:
            day, labs = item
            label: bool | None = None
        else:
            day, labs, label = item
        day = float(day)
        if day < 0:
            raise CohortError(f"negative day_offset {day}")
        index = int(math.floor(day / GRID_DAYS + 0.5))
        prev = by_index.get(index)
        if prev is None or day >= prev[0]:
            by_index[index] = (day, labs, label)
    return [Visit(idx, labs, label) for idx, (_, labs, label) in sorted(by_index.items())]


def split_folds(cohort: Cohort, k: int, seed: int) -> FoldAssignment:
    """Deterministic shuffled split into k folds with sizes within 1."""
    if k < 2:
        raise CohortError(f"k must be >= 2, got {k}")
    ids = sorted(cohort.patient_ids())
    if not ids:
        raise CohortError("empty cohort")
    if k > len(ids):
        raise CohortError(f"k={k} exceeds patient count {len(ids)}")
    rng = rng_for(seed, "split_folds")
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    base, extra = divmod(n, k)
    assignment: dict[str, int] = {}
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        for pid in order[start : start + size]:
            assignment[pid] = fold
        start += size
    result = FoldAssignment(k, assignment)
    result.validate(cohort)
    return result


def write_folds(folds: FoldAssignment, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("patient_id", "fold"))
        for pid in sorted(folds.assignment):
            writer.writerow((pid, str(folds.assignment[pid])))


def load_folds(path: str | Path) -> FoldAssignment:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "fold"]:
            raise CohortError(f"{path}: bad folds header")
        assignment = {row[0]: int(row[1]) for row in reader}
    if not assignment:
        raise CohortError(f"{path}: empty folds file")
    return FoldAssignment(max(assignment.values()) + 1, assignment)


def relabel(record: PatientRecord, labels: Sequence[int]) -> PatientRecord:
    if len(labels) != len(record.visits):
        raise CohortError("label count does not match visit count")
    visits = [replace(v, pd_label=bool(y)) for v, y in zip(record.visits, labels)]
    return PatientRecord(record.patient_id, visits)
