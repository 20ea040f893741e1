"""Shared data model, dataset validation, evaluation metrics and CSV I/O.

Datasets travel as CSV with a header row ``s1[,s2],x1,...,xD,y`` (UTF-8,
``.`` decimal separator, row order preserved).  Labels are hard {0,1}.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateVariance,
    DuplicateLocation,
    LengthMismatch,
    MissingColumn,
    NonBinaryLabel,
    NonFiniteValue,
)

__all__ = [
    "SpatialDataset",
    "EvaluationReport",
    "load_dataset",
    "loads_dataset",
    "save_dataset",
    "serialize_dataset",
    "mise",
    "relative_mse",
    "misclassification",
]


@dataclass(frozen=True)
class SpatialDataset:
    """Locations, covariate matrix and binary labels; the universal input.

    locations : (n, 1) or (n, 2) float array
    covariates: (n, D) float array
    labels    : (n,) int array with values in {0, 1}
    """

    locations: np.ndarray
    covariates: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        locs = np.atleast_2d(np.asarray(self.locations, dtype=float))
        X = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        y = np.asarray(self.labels)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "covariates", X)
        if locs.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if locs.shape[1] not in (1, 2):
            raise ValueError("locations must have 1 or 2 coordinates")
        if X.shape[0] != locs.shape[0] or y.shape[0] != locs.shape[0]:
            raise LengthMismatch("row counts disagree across fields")
        if X.shape[1] < 1:
            raise ValueError("need at least one covariate column")
        if not np.isfinite(locs).all() or not np.isfinite(X).all():
            raise NonFiniteValue("non-finite value in locations or covariates")
        yi = np.asarray(y, dtype=float)
        if not np.isfinite(yi).all():
            raise NonFiniteValue("non-finite label")
        if not np.all((yi == 0) | (yi == 1)):
            raise NonBinaryLabel("labels must be 0 or 1")
        object.__setattr__(self, "labels", yi.astype(np.int64))
        _check_no_duplicates(locs)
        locs.setflags(write=False)
        X.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SpatialDataset):
            return NotImplemented
        return (
            self.locations.shape == other.locations.shape
            and self.covariates.shape == other.covariates.shape
            and np.array_equal(self.labels, other.labels)
            and np.allclose(self.locations, other.locations, atol=1e-12, rtol=0)
            and np.allclose(self.covariates, other.covariates, atol=1e-12, rtol=0)
        )


def _check_no_duplicates(locs: np.ndarray):
    # Exact ties only: jittering would mask singular GP covariances downstream.
    rounded = [tuple(row) for row in locs]
    if len(set(rounded)) != len(rounded):
        raise DuplicateLocation("duplicate locations in dataset")


@dataclass(frozen=True)
class EvaluationReport:
    metric_name: str  # "MISE" | "RelativeMSE" | "Misclassification"
    value: float
    n_eval: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("metric value must be nonnegative")
        if self.metric_name == "Misclassification" and not 0 <= self.value <= 1:
            raise ValueError("misclassification rate must lie in [0, 1]")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _resolve_columns(header, schema=None):
    """Map header names to (location cols, covariate cols, label col)."""
    if schema is not None:
        s_cols = list(schema["locations"])
        x_cols = list(schema["covariates"])
        y_col = schema["label"]
    else:
        s_cols = [c for c in ("s1", "s2") if c in header]
        x_cols = sorted(
            (c for c in header if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        y_col = "y"
    for col in [*s_cols, *x_cols, y_col]:
        if col not in header:
            raise MissingColumn(f"column {col!r} not found in header {header}")
    if not s_cols:
        raise MissingColumn("no location columns (s1[, s2]) in header")
    if not x_cols:
        raise MissingColumn("no covariate columns (x1..xD) in header")
    return s_cols, x_cols, y_col


def loads_dataset(text: str, schema=None) -> SpatialDataset:
    """Parse the CSV interchange format from a string."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise MissingColumn("empty file: no header row")
    s_cols, x_cols, y_col = _resolve_columns(reader.fieldnames, schema)
    locs, X, y = [], [], []
    for row in reader:
        try:
            locs.append([float(row[col]) for col in s_cols])
            X.append([float(row[col]) for col in x_cols])
        except (TypeError, ValueError) as exc:
            raise NonFiniteValue(f"unparseable numeric value in row {row}") from exc
        raw = (row[y_col] or "").strip()
        if raw not in ("0", "1"):
            raise NonBinaryLabel(f"label {raw!r} outside {{0, 1}}")
        y.append(int(raw))
    if not y:
        raise ValueError("empty data section: need n >= 1 rows")
    return SpatialDataset(np.array(locs), np.array(X), np.array(y))


def load_dataset(path, schema=None) -> SpatialDataset:
    """Load and validate a dataset CSV from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        return loads_dataset(fh.read(), schema)


def serialize_dataset(ds: SpatialDataset) -> str:
    """Render a dataset back to the CSV interchange format."""
    n_s = ds.locations.shape[1]
    header = [f"s{i + 1}" for i in range(n_s)]
    header += [f"x{j + 1}" for j in range(ds.n_covariates)]
    header.append("y")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.locations[i]]
        row += [repr(float(v)) for v in ds.covariates[i]]
        row.append(str(int(ds.labels[i])))
        writer.writerow(row)
    return out.getvalue()


def save_dataset(ds: SpatialDataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_dataset(ds))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mise(estimates, truths) -> EvaluationReport:
    """Discrete approximation of the integrated squared error on probe points."""
    a = np.asarray(estimates, dtype=float)
    b = np.asarray(truths, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch("estimates and truths differ in length")
    if a.size < 1:
        raise ValueError("need at least one probe point")
    return EvaluationReport("MISE", float(np.mean((a - b) ** 2)), a.size)


def relative_mse(predicted_probs, true_probs) -> EvaluationReport:
    """Summed squared prediction error scaled by the variance of the truth.

    The scaling uses the sample variance (n-1 denominator).
    """
    p_hat = np.asarray(predicted_probs, dtype=float)
    p = np.asarray(true_probs, dtype=float)
    if p_hat.shape != p.shape:
        raise LengthMismatch("predicted and true probabilities differ in length")
    if p.size < 2:
        raise ValueError("variance undefined for fewer than two points")
    var = float(np.var(p, ddof=1))
    if var == 0.0:
        raise DegenerateVariance("true probabilities are constant")
    value = float(np.sum((p_hat - p) ** 2) / var)
    return EvaluationReport("RelativeMSE", value, p.size)


def misclassification(predicted_probs, labels, threshold: float = 0.5) -> EvaluationReport:
    """Fraction of hard classifications (p >= threshold) disagreeing with labels."""
    p = np.asarray(predicted_probs, dtype=float)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise LengthMismatch("probabilities and labels differ in length")
    if p.size < 1:
        raise ValueError("need at least one prediction")
    y_hat = (p >= threshold).astype(np.int64)
    return EvaluationReport(
        "Misclassification", float(np.mean(y_hat != y)), p.size
    )
