"""Longitudinal dataset container, CSV ingestion, and standardization.

A dataset is a list of per-subject blocks (response vector, linear-covariate
matrix, smooth-covariate matrix, random-effect design, prior weights).  Row
order within a subject is preserved as time order.  All downstream modules
consume the stacked row-major layout exposed by :class:`LongitudinalDataset`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import (
    DegenerateCovariateError,
    ParseError,
    RoleError,
    ValidationError,
)


@dataclass(frozen=True)
class SubjectBlock:
    """One subject: n_i rows of response, covariates, and designs."""

    id: str
    y: np.ndarray            # (n_i,)
    X_linear: np.ndarray     # (n_i, p)
    X_smooth: np.ndarray     # (n_i, r)
    Z: np.ndarray            # (n_i, q)
    weights: np.ndarray      # (n_i,), all > 0

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    def validate(self) -> None:
        n_i = self.y.shape[0]
        if n_i < 1:
            raise ValidationError(f"subject {self.id!r} has no observations")
        for name, arr, ncol in (
            ("X_linear", self.X_linear, None),
            ("X_smooth", self.X_smooth, None),
            ("Z", self.Z, None),
        ):
            if arr.ndim != 2 or arr.shape[0] != n_i:
                raise ValidationError(
                    f"subject {self.id!r}: {name} has {arr.shape[0]} rows, expected {n_i}"
                )
        if self.weights.shape != (n_i,):
            raise ValidationError(f"subject {self.id!r}: weights length mismatch")
        if np.any(self.weights <= 0):
            raise ValidationError(f"subject {self.id!r}: weights must be positive")
        for name, arr in (("y", self.y), ("X_linear", self.X_linear),
                          ("X_smooth", self.X_smooth), ("Z", self.Z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"subject {self.id!r}: non-finite values in {name}")


@dataclass(frozen=True)
class LongitudinalDataset:
    """n subjects with shared covariate naming; immutable after construction."""

    subjects: tuple[SubjectBlock, ...]
    linear_names: tuple[str, ...]
    smooth_names: tuple[str, ...]
    random_effect_dim: int = 1

    def __post_init__(self):
        if len(self.subjects) < 2:
            raise ValidationError(
                f"need at least 2 subjects, got {len(self.subjects)}"
            )
        if self.random_effect_dim < 1:
            raise ValidationError("random_effect_dim must be >= 1")
        p, r, q = len(self.linear_names), len(self.smooth_names), self.random_effect_dim
        for s in self.subjects:
            s.validate()
            if s.X_linear.shape[1] != p:
                raise ValidationError(f"subject {s.id!r}: expected {p} linear columns")
            if s.X_smooth.shape[1] != r:
                raise ValidationError(f"subject {s.id!r}: expected {r} smooth columns")
            if s.Z.shape[1] != q:
                raise ValidationError(f"subject {s.id!r}: expected {q} random-effect columns")

    # -- stacked views -------------------------------------------------

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_total(self) -> int:
        return int(sum(s.n_obs for s in self.subjects))

    @property
    def block_sizes(self) -> np.ndarray:
        return np.array([s.n_obs for s in self.subjects], dtype=int)

    @property
    def row_offsets(self) -> np.ndarray:
        """Start row of each subject in the stacked layout (length n)."""
        return np.concatenate(([0], np.cumsum(self.block_sizes)[:-1]))

    def stack_y(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.subjects])

    def stack_linear(self) -> np.ndarray:
        return np.vstack([s.X_linear for s in self.subjects]) if self.linear_names \
            else np.empty((self.n_total, 0))

    def stack_smooth(self) -> np.ndarray:
        return np.vstack([s.X_smooth for s in self.subjects]) if self.smooth_names \
            else np.empty((self.n_total, 0))

    def stack_Z(self) -> np.ndarray:
        return np.vstack([s.Z for s in self.subjects])

    def stack_weights(self) -> np.ndarray:
        return np.concatenate([s.weights for s in self.subjects])


@dataclass(frozen=True)
class ColumnRoleConfig:
    """Maps CSV header names to model roles."""

    subject_id: str
    response: str
    linear: tuple[str, ...] = ()
    smooth: tuple[str, ...] = ()
    random_effect: tuple[str, ...] = ()   # empty -> random intercept (column of ones)
    weight: str | None = None


@dataclass(frozen=True)
class StandardizationRecord:
    """Affine maps applied per column, stored so fits can be reported on
    the original scale and predictions can map new covariates in."""

    linear_means: np.ndarray   # (p,)
    linear_scales: np.ndarray  # (p,) standard deviations (1/N convention)
    smooth_mins: np.ndarray    # (r,)
    smooth_ranges: np.ndarray  # (r,)

    def transform_linear(self, X: np.ndarray) -> np.ndarray:
        return (X - self.linear_means) / self.linear_scales

    def invert_linear(self, X_std: np.ndarray) -> np.ndarray:
        return X_std * self.linear_scales + self.linear_means

    def transform_smooth(self, X: np.ndarray) -> np.ndarray:
        return (X - self.smooth_mins) / self.smooth_ranges

    def invert_smooth(self, X_std: np.ndarray) -> np.ndarray:
        return X_std * self.smooth_ranges + self.smooth_mins

    def beta_to_original(self, beta_std: np.ndarray) -> np.ndarray:
        """Coefficients on z-scored covariates mapped to the raw scale."""
        return beta_std / self.linear_scales

    def to_dict(self) -> dict:
        return {
            "linear_means": self.linear_means.tolist(),
            "linear_scales": self.linear_scales.tolist(),
            "smooth_mins": self.smooth_mins.tolist(),
            "smooth_ranges": self.smooth_ranges.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationRecord":
        return cls(*(np.asarray(d[k], dtype=float) for k in
                     ("linear_means", "linear_scales", "smooth_mins", "smooth_ranges")))


def _parse_cell(text: str, col: str, row_index: int) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ParseError(
            f"row {row_index}: cannot parse {text!r} in column {col!r} as a number"
        ) from None


def load_csv(path, config: ColumnRoleConfig) -> LongitudinalDataset:
    """Read a headered CSV and group rows into subject blocks (file order).

    Standardization is *not* applied here; call :func:`standardize` on the
    result.  Raises :class:`RoleError` for missing columns,
    :class:`ParseError` (with the 1-based data row index) for non-numeric
    cells, and :class:`ValidationError` for structural problems.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file, expected a header row")
        header = set(reader.fieldnames)
        needed = [config.subject_id, config.response, *config.linear,
                  *config.smooth, *config.random_effect]
        if config.weight:
            needed.append(config.weight)
        for col in needed:
            if col not in header:
                raise RoleError(f"configured column {col!r} not found in CSV header")

        order: list[str] = []
        rows: dict[str, list[dict]] = {}
        for idx, row in enumerate(reader, start=1):
            sid = row[config.subject_id]
            if sid is None or sid == "":
                raise ValidationError(f"row {idx}: empty subject id")
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append((idx, row))

    if not order:
        raise ValidationError(f"{path}: no data rows")

    subjects = []
    for sid in order:
        idx_rows = rows[sid]
        y = np.array([_parse_cell(r[config.response], config.response, i)
                      for i, r in idx_rows])
        Xl = np.array([[_parse_cell(r[c], c, i) for c in config.linear]
                       for i, r in idx_rows]).reshape(len(idx_rows), len(config.linear))
        Xs = np.array([[_parse_cell(r[c], c, i) for c in config.smooth]
                       for i, r in idx_rows]).reshape(len(idx_rows), len(config.smooth))
        if config.random_effect:
            Z = np.array([[_parse_cell(r[c], c, i) for c in config.random_effect]
                          for i, r in idx_rows])
        else:
            Z = np.ones((len(idx_rows), 1))
        if config.weight:
            w = np.array([_parse_cell(r[config.weight], config.weight, i)
                          for i, r in idx_rows])
        else:
            w = np.ones(len(idx_rows))
        subjects.append(SubjectBlock(id=sid, y=y, X_linear=Xl, X_smooth=Xs,
                                     Z=Z, weights=w))

    return LongitudinalDataset(
        subjects=tuple(subjects),
        linear_names=tuple(config.linear),
        smooth_names=tuple(config.smooth),
        random_effect_dim=subjects[0].Z.shape[1],
    )


def from_arrays(y, X_linear, X_smooth, subject_index, Z=None, weights=None,
                linear_names=None, smooth_names=None) -> LongitudinalDataset:
    """Build a dataset from stacked arrays plus a subject label per row."""
    y = np.asarray(y, dtype=float)
    X_linear = np.asarray(X_linear, dtype=float).reshape(len(y), -1)
    X_smooth = np.asarray(X_smooth, dtype=float).reshape(len(y), -1)
    labels = np.asarray(subject_index)
    if Z is None:
        Z = np.ones((len(y), 1))
    Z = np.asarray(Z, dtype=float).reshape(len(y), -1)
    if weights is None:
        weights = np.ones(len(y))
    weights = np.asarray(weights, dtype=float)

    order: list = []
    seen = set()
    for lab in labels:
        if lab not in seen:
            seen.add(lab)
            order.append(lab)
    subjects = []
    for lab in order:
        m = labels == lab
        subjects.append(SubjectBlock(
            id=str(lab), y=y[m], X_linear=X_linear[m], X_smooth=X_smooth[m],
            Z=Z[m], weights=weights[m]))
    p, r = X_linear.shape[1], X_smooth.shape[1]
    return LongitudinalDataset(
        subjects=tuple(subjects),
        linear_names=tuple(linear_names) if linear_names else tuple(f"x{j+1}" for j in range(p)),
        smooth_names=tuple(smooth_names) if smooth_names else tuple(f"s{k+1}" for k in range(r)),
        random_effect_dim=Z.shape[1],
    )


def subset_columns(ds: LongitudinalDataset, keep_linear,
                   keep_smooth) -> LongitudinalDataset:
    """Dataset restricted to the given linear / smooth column indices."""
    keep_linear = np.asarray(keep_linear, dtype=int)
    keep_smooth = np.asarray(keep_smooth, dtype=int)
    subjects = tuple(
        replace(s, X_linear=s.X_linear[:, keep_linear],
                X_smooth=s.X_smooth[:, keep_smooth])
        for s in ds.subjects)
    return replace(ds, subjects=subjects,
                   linear_names=tuple(ds.linear_names[j] for j in keep_linear),
                   smooth_names=tuple(ds.smooth_names[k] for k in keep_smooth))


def standardize(ds: LongitudinalDataset) -> tuple[LongitudinalDataset, StandardizationRecord]:
    """Z-score linear columns (mean 0, variance 1) and range-normalize
    smooth columns onto [0,1]; returns the transformed dataset plus the
    record needed to undo both maps.

    Variance uses the 1/N (empirical) convention.  A constant column in
    either role raises :class:`DegenerateCovariateError` naming it.
    """
    Xl = ds.stack_linear()
    Xs = ds.stack_smooth()

    if Xl.shape[1]:
        means = Xl.mean(axis=0)
        scales = Xl.std(axis=0)  # ddof=0
        for j, s in enumerate(scales):
            if s <= 0.0:
                raise DegenerateCovariateError(
                    f"linear covariate {ds.linear_names[j]!r} has zero variance")
    else:
        means = np.empty(0)
        scales = np.empty(0)

    if Xs.shape[1]:
        mins = Xs.min(axis=0)
        ranges = Xs.max(axis=0) - mins
        for k, r in enumerate(ranges):
            if r <= 0.0:
                raise DegenerateCovariateError(
                    f"smooth covariate {ds.smooth_names[k]!r} has zero range")
    else:
        mins = np.empty(0)
        ranges = np.empty(0)

    record = StandardizationRecord(means, scales, mins, ranges)
    new_subjects = tuple(
        replace(s,
                X_linear=record.transform_linear(s.X_linear) if Xl.shape[1] else s.X_linear,
                X_smooth=record.transform_smooth(s.X_smooth) if Xs.shape[1] else s.X_smooth)
        for s in ds.subjects
    )
    return replace(ds, subjects=new_subjects), record
