"""Tabular input, the target-covariate grid, baselines and person-period expansion.

Every observation carries a response (a real ``y`` or a 0/1 event
indicator), a value ``t`` of the target covariate, and a covariate vector
``x``. Leaf functions live on the grid of distinct ``t`` values, so all
``t`` must lie on that grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .exceptions import (
    DataError,
    DegenerateGridError,
    EmptyDataError,
    GridMembershipError,
    MissingCellError,
    ParseError,
    SchemaError,
)

KINDS = ("continuous", "binary", "survival")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Sorted distinct values of the target covariate.

    A one-point grid is representable (scalar-leaf models use it) but
    :func:`build_time_grid` refuses to produce one unless asked.
    """

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(np.ravel(self.values))
        if v.size < 1:
            raise DegenerateGridError("time grid is empty")
        if not np.all(np.isfinite(v)):
            raise DataError("time grid contains non-finite values")
        if np.any(np.diff(v) <= 0):
            raise DataError("time grid values must be strictly increasing")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def t_range(self) -> float:
        return float(self.values[-1] - self.values[0])

    def index_of(self, t, atol: float = 1e-9) -> np.ndarray:
        """Map target values onto grid indices.

        Raises
        ------
        GridMembershipError
            If any value is farther than ``atol`` (relative to its magnitude)
            from every grid point.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = self.values
        pos = np.clip(np.searchsorted(v, t), 0, v.size - 1)
        lower = np.clip(pos - 1, 0, v.size - 1)
        take_lower = np.abs(v[lower] - t) < np.abs(v[pos] - t)
        idx = np.where(take_lower, lower, pos)
        tol = atol * np.maximum(1.0, np.abs(t))
        bad = ~(np.abs(v[idx] - t) <= tol)
        if np.any(bad):
            first = t[np.argmax(bad)]
            raise GridMembershipError(f"t={first!r} is not on the time grid")
        return idx.astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    """Column-oriented observations.

    ``response`` holds ``y`` for continuous data and the event (or
    censoring) indicator for binary and survival data.
    """

    response: np.ndarray
    t: np.ndarray
    X: np.ndarray
    kind: str = "continuous"
    covariate_names: tuple = ()
    response_name: str = "y"
    time_name: str = "t"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown data kind {self.kind!r}; expected one of {KINDS}")
        y = _frozen(np.ravel(self.response))
        t = _frozen(np.ravel(self.t))
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        X = _frozen(X)
        n = y.size
        if t.size != n or X.shape[0] != n:
            raise DataError(
                f"column lengths differ: response {n}, t {t.size}, X {X.shape[0]}"
            )
        if X.shape[1] < 1:
            raise DataError("at least one covariate is required")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(t)) and np.all(np.isfinite(X))):
            raise DataError("dataset contains missing or non-finite values")
        if self.kind != "continuous" and not np.all((y == 0) | (y == 1)):
            raise DataError(f"{self.kind} response must be 0/1")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} covariate names for {X.shape[1]} columns")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.response.size)

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.response[index], self.t[index], self.X[index], self.kind,
            self.covariate_names, self.response_name, self.time_name,
        )


@dataclass(frozen=True)
class Schema:
    """Column roles for :func:`load_csv`.

    ``response`` names the outcome column (the event indicator for
    survival data). ``covariates=None`` takes every remaining column in file
    order. Columns listed in ``categorical`` are one-hot encoded, one
    indicator per level, in sorted level order.
    """

    response: str
    time: str
    kind: str = "continuous"
    covariates: Sequence[str] | None = None
    categorical: Sequence[str] = field(default_factory=tuple)


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    # numpy's string-to-float is correctly rounded; pd.to_numeric is not always
    values = np.array([_to_float(v) for v in raw.str.strip()], dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ParseError(
            f"row {i + 1}, column {column!r}: cannot parse {raw.iloc[i]!r} as a finite number",
            row=i + 1,
            column=column,
        )
    return values


def read_frame(path) -> pd.DataFrame:
    """Raw CSV cells as stripped strings, with header names stripped too."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise EmptyDataError(f"{path}: file is empty") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    frame.columns = [c.strip() for c in frame.columns]
    if len(frame) == 0:
        raise EmptyDataError(f"{path}: no data rows")
    return frame


def load_csv(path, schema: Schema) -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`.

    Rows keep file order. Missing cells are rejected (complete cases only).
    """
    return dataset_from_frame(read_frame(path), schema, source=str(path))


def dataset_from_frame(frame: pd.DataFrame, schema: Schema, source: str = "data") -> Dataset:
    """Typed :class:`Dataset` from string cells, as returned by :func:`read_frame`."""
    path = source
    roles = [schema.response, schema.time]
    for col in roles:
        if col not in frame.columns:
            raise SchemaError(f"{path}: column {col!r} not found (have {list(frame.columns)})")
    if schema.covariates is None:
        covariates = [c for c in frame.columns if c not in roles]
    else:
        covariates = list(schema.covariates)
    categorical = set(schema.categorical)
    for col in list(covariates) + list(categorical):
        if col not in frame.columns:
            raise SchemaError(f"{path}: column {col!r} not found (have {list(frame.columns)})")
    if not covariates:
        raise SchemaError(f"{path}: no covariate columns")

    y = _parse_numeric(frame, schema.response)
    t = _parse_numeric(frame, schema.time)
    blocks, names = [], []
    for col in covariates:
        if col in categorical:
            cells = frame[col].str.strip()
            empty = (cells == "").to_numpy()
            if np.any(empty):
                i = int(np.argmax(empty))
                raise ParseError(f"row {i + 1}, column {col!r}: empty cell", row=i + 1, column=col)
            levels = sorted(cells.unique())
            for level in levels:
                blocks.append((cells == level).to_numpy(dtype=float))
                names.append(f"{col}={level}")
        else:
            blocks.append(_parse_numeric(frame, col))
            names.append(col)
    if schema.kind != "continuous":
        bad = ~((y == 0) | (y == 1))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ParseError(
                f"row {i + 1}, column {schema.response!r}: {schema.kind} response must be 0 or 1",
                row=i + 1,
                column=schema.response,
            )
    return Dataset(
        y, t, np.column_stack(blocks), schema.kind, tuple(names),
        response_name=schema.response, time_name=schema.time,
    )


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` so that :func:`load_csv` reads it back unchanged.

    Floats are written with ``repr`` precision; categorical covariates are
    written in their expanded indicator form.
    """
    columns = [dataset.response_name, dataset.time_name, *dataset.covariate_names]
    if len(set(columns)) != len(columns):
        raise SchemaError(f"duplicate column names {columns}")
    data = np.column_stack([dataset.response, dataset.t, dataset.X])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def schema_of(dataset: Dataset) -> Schema:
    """Schema that reloads a file written by :func:`write_csv`."""
    return Schema(dataset.response_name, dataset.time_name, dataset.kind,
                  list(dataset.covariate_names))


def build_time_grid(dataset: Dataset, allow_single: bool = False) -> TimeGrid:
    """Sorted distinct target values of ``dataset``.

    A single distinct value raises :class:`DegenerateGridError` unless
    ``allow_single`` is set, in which case a one-point grid is returned.
    """
    if dataset.n == 0:
        raise EmptyDataError("dataset has no rows")
    values = np.unique(dataset.t)
    if values.size < 2 and not allow_single:
        raise DegenerateGridError(
            "target covariate takes a single value; smoothing over it is undefined"
        )
    return TimeGrid(values)


@dataclass(frozen=True)
class PersonPeriodTable:
    """One row per subject per at-risk grid value.

    ``event`` is 1 only on the final row of a subject whose event was
    observed.
    """

    subject: np.ndarray
    s: np.ndarray
    tidx: np.ndarray
    event: np.ndarray
    X: np.ndarray
    grid: TimeGrid
    covariate_names: tuple = ()

    @property
    def n_rows(self) -> int:
        return int(self.event.size)


def expand_survival(dataset: Dataset, grid: TimeGrid) -> PersonPeriodTable:
    """Person-period form of discrete time-to-event records.

    Subject ``i`` contributes one row for each grid value up to and
    including ``t_i``; the row at ``t_i`` carries the event flag ``c_i``.
    """
    if dataset.kind not in ("survival", "binary"):
        raise DataError(f"expand_survival needs survival data, got {dataset.kind!r}")
    last = grid.index_of(dataset.t)
    counts = last + 1
    subject = np.repeat(np.arange(dataset.n), counts)
    starts = np.cumsum(counts) - counts
    tidx = np.arange(counts.sum()) - np.repeat(starts, counts)
    event = np.zeros(subject.size)
    event[starts + last] = dataset.response
    return PersonPeriodTable(
        subject=_frozen(subject, np.int64),
        s=_frozen(grid.values[tidx]),
        tidx=_frozen(tidx, np.int64),
        event=_frozen(event),
        X=_frozen(dataset.X[subject]),
        grid=grid,
        covariate_names=dataset.covariate_names,
    )


@dataclass(frozen=True)
class BaselineFunction:
    """The centring function over the grid, on the latent scale."""

    grid: TimeGrid
    alpha: np.ndarray

    def __post_init__(self):
        a = _frozen(np.ravel(self.alpha))
        if a.size != self.grid.size:
            raise DataError(f"baseline has {a.size} values for a grid of {self.grid.size}")
        if not np.all(np.isfinite(a)):
            raise DataError("baseline must be finite at every grid point")
        object.__setattr__(self, "alpha", a)

    def at(self, tidx) -> np.ndarray:
        return self.alpha[np.asarray(tidx)]

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> "BaselineFunction":
        return cls(grid, np.full(grid.size, float(value)))


def _probit_rate(events, totals):
    eps = 1.0 / (2.0 * totals)
    rate = np.clip(events / totals, eps, 1.0 - eps)
    return ndtri(rate)


def estimate_alpha(data, grid: TimeGrid) -> BaselineFunction:
    """Per-grid-value baseline.

    Continuous data: the mean response at each ``t``. Binary and survival
    data: the probit of the event rate at each ``t``, clamped to
    ``[1/(2n_s), 1 - 1/(2n_s)]``; survival data is first expanded to
    person-period rows.
    """
    if isinstance(data, PersonPeriodTable):
        tidx, y, kind = data.tidx, data.event, "survival"
    elif data.kind == "survival":
        table = expand_survival(data, grid)
        tidx, y, kind = table.tidx, table.event, "survival"
    else:
        tidx, y, kind = grid.index_of(data.t), data.response, data.kind
    return cell_baseline(tidx, y, grid, kind)


def cell_baseline(tidx, y, grid: TimeGrid, kind: str) -> BaselineFunction:
    """Mean response (continuous) or probit event rate per grid cell."""
    tidx = np.asarray(tidx)
    totals = np.bincount(tidx, minlength=grid.size).astype(float)
    if np.any(totals == 0):
        missing = grid.values[totals == 0]
        raise MissingCellError(
            f"no observations at grid values {missing.tolist()}; merge or coarsen the grid"
        )
    sums = np.bincount(tidx, weights=y, minlength=grid.size)
    if kind == "continuous":
        return BaselineFunction(grid, sums / totals)
    return BaselineFunction(grid, _probit_rate(sums, totals))


def case_control_sample(dataset: Dataset, control_fraction: float, seed: int) -> Dataset:
    """Keep every event and thin the non-events.

    Each non-event row is kept independently with probability
    ``control_fraction``, so within every terminal-time stratum the expected
    share of controls kept is ``control_fraction``.
    """
    if not 0.0 < control_fraction <= 1.0:
        raise DataError(f"control_fraction must be in (0, 1], got {control_fraction}")
    if dataset.kind not in ("survival", "binary"):
        raise DataError("case-control sampling needs event data")
    rng = np.random.default_rng(seed)
    u = rng.random(dataset.n)
    keep = (dataset.response == 1) | (u < control_fraction)
    return dataset.subset(np.flatnonzero(keep))
