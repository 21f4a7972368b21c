"""Observed data container, outcome scaling and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InputFileError,
    MissingColumnError,
    MissingValueError,
    NonBinaryTreatmentError,
    NonNumericError,
    OutOfRangeError,
    ValidationError,
)


@dataclass(frozen=True)
class OutcomeScale:
    """Affine map taking the raw outcome range ``[lower, upper]`` onto ``[0, 1]``."""

    lower: float = 0.0
    upper: float = 1.0
    applied: bool = False

    def __post_init__(self):
        if self.applied and not self.upper > self.lower:
            raise ValidationError(f"degenerate outcome range [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower if self.applied else 1.0

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "applied": self.applied}


IDENTITY_SCALE = OutcomeScale()


@dataclass(frozen=True)
class ObservedDataset:
    """n iid observations of (W, A, Y) with Y already on the unit interval."""

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    scale: OutcomeScale = IDENTITY_SCALE
    w_names: tuple = field(default=())

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        a = np.asarray(self.a, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if not (w.shape[0] == a.shape[0] == y.shape[0]):
            raise ValidationError("W, A and Y must have the same number of rows")
        if w.shape[0] < 1 or w.shape[1] < 1:
            raise ValidationError("dataset needs at least one row and one covariate")
        for name, arr in (("W", w), ("A", a), ("Y", y)):
            if not np.all(np.isfinite(arr)):
                raise MissingValueError(f"{name} contains missing or non-finite values")
        if not np.all((a == 0) | (a == 1)):
            raise NonBinaryTreatmentError("treatment must be coded 0/1")
        if np.any(y < 0) or np.any(y > 1):
            raise OutOfRangeError("outcome must lie in [0, 1]; scale it first")
        for arr in (w, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"W{j + 1}" for j in range(w.shape[1])))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def check_folds(self, v: int) -> None:
        if self.n < 2 * v:
            raise ValidationError(f"n={self.n} is too small for {v} folds (need n >= {2 * v})")

    def with_y(self, y) -> "ObservedDataset":
        return ObservedDataset(self.w, self.a, y, self.scale, self.w_names)


def scale_outcome(y, lower: float, upper: float) -> np.ndarray:
    """Map ``y`` from ``[lower, upper]`` to ``[0, 1]``."""
    if not upper > lower:
        raise ValidationError(f"degenerate outcome range: upper={upper} <= lower={lower}")
    y = np.asarray(y, dtype=float)
    if np.any(y < lower) or np.any(y > upper):
        raise OutOfRangeError(f"outcome values outside [{lower}, {upper}]")
    return (y - lower) / (upper - lower)


def unscale_estimates(ate_s, vte_s, se_ate_s, se_vte_s, scale: OutcomeScale):
    """Return (ate, vte, se_ate, se_vte) on the original outcome scale.

    The ATE and its SE scale with the range width, the VTE and its SE with its square.
    """
    if not scale.applied:
        return ate_s, vte_s, se_ate_s, se_vte_s
    k = scale.upper - scale.lower
    return k * ate_s, k * k * vte_s, k * se_ate_s, k * k * se_vte_s


def _parse_cell(raw: str, col: str, row: int) -> float:
    s = raw.strip()
    if s == "" or s.lower() in {"na", "nan", "null", "none"}:
        raise MissingValueError(f"missing value in column {col!r}, data row {row}")
    try:
        val = float(s)
    except ValueError:
        raise NonNumericError(f"non-numeric cell {raw!r} in column {col!r}, data row {row}") from None
    if not math.isfinite(val):
        raise MissingValueError(f"non-finite value in column {col!r}, data row {row}")
    return val


def load_csv(
    path,
    y_col: str,
    a_col: str,
    w_cols: Sequence[str] | None = None,
    bounds: tuple[float, float] | None = None,
) -> ObservedDataset:
    """Read a headered UTF-8 CSV into a validated dataset.

    ``w_cols=None`` takes every column other than the outcome and treatment.

    A 0/1 outcome is kept as is. Any other outcome is rescaled to the unit
    interval using ``bounds`` when given and the column min/max otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"no such file: {path}")
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except (OSError, UnicodeDecodeError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise MissingColumnError(f"{path} has no header row")
    header = [h.strip() for h in header]
    if w_cols is None:
        w_cols = [h for h in header if h not in (y_col, a_col)]
        if not w_cols:
            raise MissingColumnError(f"{path} has no covariate columns")
    wanted = [y_col, a_col, *w_cols]
    idx = {}
    for col in wanted:
        if col not in header:
            raise MissingColumnError(f"column {col!r} not found in {path}")
        idx[col] = header.index(col)
    if not rows:
        raise ValidationError(f"{path} has no data rows")

    table = {col: np.empty(len(rows)) for col in wanted}
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"data row {i} has {len(row)} fields, header has {len(header)}")
        for col in wanted:
            table[col][i - 1] = _parse_cell(row[idx[col]], col, i)

    a = table[a_col]
    if not np.all((a == 0) | (a == 1)):
        bad = a[(a != 0) & (a != 1)][0]
        raise NonBinaryTreatmentError(f"treatment column {a_col!r} has non-binary value {bad:g}")

    y = table[y_col]
    if bounds is not None:
        lower, upper = map(float, bounds)
        scale = OutcomeScale(lower, upper, applied=True)
        y = scale_outcome(y, lower, upper)
    elif np.all((y == 0) | (y == 1)):
        scale = IDENTITY_SCALE
    else:
        lower, upper = float(y.min()), float(y.max())
        if not upper > lower:
            raise ValidationError(f"outcome column {y_col!r} is constant")
        scale = OutcomeScale(lower, upper, applied=True)
        y = scale_outcome(y, lower, upper)

    w = np.column_stack([table[c] for c in w_cols])
    return ObservedDataset(w, a, y, scale, tuple(w_cols))
