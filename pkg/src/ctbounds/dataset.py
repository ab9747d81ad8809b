"""Experiment data: loading, validation and cross-fitting fold plans."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    CTBWarning,
    MissingColumn,
    MissingCovariateCell,
    MissingOutcomeForResponder,
    NonBinaryFlag,
    PropensityOutOfRange,
    TooFewUnits,
)

PROPENSITY_EPS = 0.01


@dataclass(frozen=True)
class Observation:
    """One experimental unit. ``y`` is None when the outcome is absent."""

    y: float | None
    s: int
    d: int
    x: np.ndarray
    p_known: float | None = None


@dataclass(frozen=True)
class Schema:
    outcome: str
    response: str
    treatment: str
    covariates: tuple[str, ...]
    propensity: str | None = None

    @classmethod
    def coerce(cls, schema: Schema | Mapping) -> Schema:
        if isinstance(schema, Schema):
            return schema
        return cls(
            outcome=schema["outcome"],
            response=schema["response"],
            treatment=schema["treatment"],
            covariates=tuple(schema["covariates"]),
            propensity=schema.get("propensity"),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable column store of observations.

    Outcomes of non-responders are stored as NaN, as are absent propensities.
    Build instances with :meth:`from_arrays` (or :func:`load_csv`), which run
    all validation rules.
    """

    y: np.ndarray
    s: np.ndarray
    d: np.ndarray
    X: np.ndarray
    p: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    @classmethod
    def from_arrays(cls, y, s, d, X, p=None, covariate_names: Sequence[str] | None = None,
                    ) -> Dataset:
        s_raw = np.asarray(s, dtype=float).ravel()
        d_raw = np.asarray(d, dtype=float).ravel()
        n = s_raw.shape[0]
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1)
        y = np.asarray(y, dtype=float).ravel().copy()
        if d_raw.shape[0] != n or y.shape[0] != n or X.shape[0] != n:
            raise ValueError("y, s, d and X must have the same number of rows")
        for name, col in (("response", s_raw), ("treatment", d_raw)):
            if np.any(np.isnan(col)) or not np.all(np.isin(col, (0.0, 1.0))):
                raise NonBinaryFlag(f"{name} flag must be 0 or 1 in every row")
        s_int = s_raw.astype(np.int8)
        d_int = d_raw.astype(np.int8)

        missing_y = np.isnan(y) & (s_int == 1)
        if missing_y.any():
            rows = np.flatnonzero(missing_y)[:5].tolist()
            raise MissingOutcomeForResponder(f"responders with empty outcome at rows {rows}")
        stray = (~np.isnan(y)) & (s_int == 0)
        if stray.any():
            warnings.warn(f"{int(stray.sum())} non-responders carry an outcome; ignored",
                          CTBWarning, stacklevel=2)
            y[stray] = np.nan
        if np.isnan(X).any():
            rows = np.flatnonzero(np.isnan(X).any(axis=1))[:5].tolist()
            raise MissingCovariateCell(f"missing covariate cells at rows {rows}")

        if p is None:
            p_arr = np.full(n, np.nan)
        else:
            p_arr = np.asarray(p, dtype=float).ravel()
            if p_arr.shape[0] != n:
                raise ValueError("propensity column has the wrong length")
            given = ~np.isnan(p_arr)
            bad = given & ((p_arr < PROPENSITY_EPS) | (p_arr > 1 - PROPENSITY_EPS))
            if bad.any():
                raise PropensityOutOfRange(
                    f"propensity must lie in [{PROPENSITY_EPS}, {1 - PROPENSITY_EPS}]; "
                    f"offending value {p_arr[bad][0]!r}")

        if not np.any((s_int == 1) & (d_int == 1)) or not np.any((s_int == 1) & (d_int == 0)):
            raise TooFewUnits("need at least one responder in each treatment arm")

        if covariate_names is None:
            covariate_names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        covariate_names = tuple(covariate_names)
        if len(covariate_names) != X.shape[1]:
            raise ValueError("covariate_names length does not match X")
        return cls(_readonly(y), _readonly(s_int), _readonly(d_int), _readonly(X),
                   _readonly(p_arr), covariate_names)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def has_propensity(self) -> bool:
        return bool(np.all(~np.isnan(self.p)))

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Observation:
        y = None if np.isnan(self.y[i]) else float(self.y[i])
        p = None if np.isnan(self.p[i]) else float(self.p[i])
        return Observation(y, int(self.s[i]), int(self.d[i]), self.X[i], p)

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.covariate_names == other.covariate_names
                and all(np.array_equal(a, b, equal_nan=True) for a, b in (
                    (self.y, other.y), (self.s, other.s), (self.d, other.d),
                    (self.X, other.X), (self.p, other.p))))

    def subset(self, idx) -> Dataset:
        """Rows ``idx`` as a new dataset (validation re-run)."""
        idx = np.asarray(idx)
        return Dataset.from_arrays(self.y[idx], self.s[idx], self.d[idx], self.X[idx],
                                   self.p[idx], self.covariate_names)

    def to_frame(self, schema: Schema | Mapping | None = None) -> pd.DataFrame:
        schema = Schema.coerce(schema) if schema is not None else Schema(
            "y", "s", "d", self.covariate_names, "p" if self.has_propensity else None)
        cols = {schema.outcome: self.y, schema.response: self.s, schema.treatment: self.d}
        for name, col in zip(schema.covariates, self.X.T):
            cols[name] = col
        if schema.propensity is not None:
            cols[schema.propensity] = self.p
        return pd.DataFrame(cols)

    def to_csv(self, path, schema: Schema | Mapping | None = None) -> None:
        # repr-exact float formatting keeps load -> save -> load stable
        self.to_frame(schema).to_csv(path, index=False, float_format="%.17g")


def load_csv(path, schema: Schema | Mapping) -> Dataset:
    """Read and validate a CSV file; empty cells are absent values."""
    schema = Schema.coerce(schema)
    df = pd.read_csv(path, float_precision="round_trip")
    needed = [schema.outcome, schema.response, schema.treatment, *schema.covariates]
    if schema.propensity is not None:
        needed.append(schema.propensity)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise MissingColumn(f"columns not found in {path}: {missing}")

    def numeric(col):
        try:
            return pd.to_numeric(df[col]).to_numpy(dtype=float)
        except (ValueError, TypeError) as exc:
            raise NonBinaryFlag(f"column {col!r} is not numeric") from exc

    p = numeric(schema.propensity) if schema.propensity is not None else None
    X = np.column_stack([numeric(c) for c in schema.covariates]) if schema.covariates \
        else np.empty((len(df), 0))
    return Dataset.from_arrays(
        numeric(schema.outcome), numeric(schema.response), numeric(schema.treatment),
        X, p, schema.covariates,
    )


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of units to folds ``1..k``."""

    k: int
    assignment: np.ndarray
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def splits(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for fold in range(1, self.k + 1):
            yield fold, self.train_indices(fold), self.test_indices(fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k + 1)[1:]

    @classmethod
    def from_assignment(cls, assignment, seed: int = 0) -> FoldPlan:
        a = np.asarray(assignment, dtype=np.int64)
        k = int(a.max())
        if a.min() < 1 or len(np.unique(a)) != k:
            raise ValueError("fold ids must cover 1..k")
        a = a.copy()
        a.setflags(write=False)
        return cls(k, a, seed)


def make_folds(data: Dataset | int, k: int, seed: int) -> FoldPlan:
    n = data if isinstance(data, (int, np.integer)) else data.n
    if k < 2:
        raise TooFewUnits("need at least two folds")
    if n < 2 * k:
        raise TooFewUnits(f"{n} units cannot fill {k} folds of size >= 2")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k + 1
    assignment.setflags(write=False)
    return FoldPlan(k, assignment, seed)


@dataclass(frozen=True)
class ResponseSummary:
    n_control: int
    n_treated: int
    responders_control: int
    responders_treated: int
    rate_control: float
    rate_treated: float
    q: float

    @property
    def monotonicity_suspect(self) -> bool:
        """Control responds more often than treated, which positive monotonicity forbids."""
        return self.q > 1.0


def summary(data: Dataset) -> ResponseSummary:
    s, d = data.s.astype(float), data.d.astype(float)
    n1, n0 = d.sum(), (1 - d).sum()
    r1, r0 = (s * d).sum(), (s * (1 - d)).sum()
    rate1, rate0 = r1 / n1, r0 / n0
    return ResponseSummary(int(n0), int(n1), int(r0), int(r1), rate0, rate1, rate0 / rate1)
