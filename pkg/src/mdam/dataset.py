"""Categorical survey data with unit and item nonresponse.

Cells hold 0-based level indices; level 0 of every variable is the baseline
category used by the regression models.  Missing cells carry the ``MISSING``
sentinel.  Item-nonresponse indicators are derived on demand and never stored.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MISSING = -1

WEIGHT_KINDS = ("design", "adjusted", "constructed")


class SchemaError(ValueError):
    """Raised when input data do not conform to the declared variables."""


@dataclass(frozen=True)
class VariableDef:
    """A categorical survey variable.

    ``role`` is ``"X"`` when a population margin is available for the
    variable and ``"Y"`` otherwise.
    """

    name: str
    levels: tuple[str, ...]
    role: str = "Y"
    update_rank: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if len(self.levels) < 2:
            raise SchemaError(f"variable {self.name!r} needs at least two levels")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"variable {self.name!r} has duplicate levels")
        if self.role not in ("X", "Y"):
            raise SchemaError(f"variable {self.name!r}: role must be 'X' or 'Y'")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def index_of(self, label) -> int:
        try:
            return self.levels.index(str(label))
        except ValueError:
            raise SchemaError(
                f"unknown level {label!r} for variable {self.name!r}"
            ) from None


@dataclass(frozen=True)
class CsvSchema:
    """How survey variables map onto columns of a delimited file."""

    variables: tuple[VariableDef, ...]
    columns: dict[str, str] = field(default_factory=dict)
    weight_column: str | None = "weight"
    unit_nr_column: str | None = None
    missing_codes: frozenset[str] = frozenset({"", "NA"})
    delimiter: str = ","
    weight_kind: str = "design"

    def column_for(self, name: str) -> str:
        return self.columns.get(name, name)


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Immutable unit-level categorical survey records.

    Parameters
    ----------
    variables : tuple of VariableDef
    cells : (n, K) int array of level indices or ``MISSING``.
    unit_nr : (n,) bool array, True for unit nonrespondents.
    weights : (n,) float array of analysis weights (0 allowed before
        construction).
    N : population size.
    weight_kind : one of ``"design"``, ``"adjusted"``, ``"constructed"``.
    weight_pending : (n,) bool array flagging weights still to be built.
    completed : True for imputed datasets, where unit nonrespondents carry
        imputed cells and nothing is missing.
    """

    variables: tuple[VariableDef, ...]
    cells: np.ndarray
    unit_nr: np.ndarray
    weights: np.ndarray
    N: int
    weight_kind: str = "design"
    weight_pending: np.ndarray | None = None
    completed: bool = False

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int64, copy=True)
        if cells.ndim != 2 or cells.shape[1] != len(self.variables):
            raise SchemaError("cells must be an (n, K) array matching variables")
        n = cells.shape[0]
        unit_nr = np.array(self.unit_nr, dtype=bool, copy=True).reshape(n)
        weights = np.array(self.weights, dtype=float, copy=True).reshape(n)
        pending = (
            np.zeros(n, dtype=bool)
            if self.weight_pending is None
            else np.array(self.weight_pending, dtype=bool, copy=True).reshape(n)
        )
        for k, var in enumerate(self.variables):
            col = cells[:, k]
            bad = (col != MISSING) & ((col < 0) | (col >= var.n_levels))
            if bad.any():
                raise SchemaError(f"level index out of range for {var.name!r}")
        if self.completed:
            if (cells == MISSING).any():
                raise SchemaError("a completed dataset cannot contain missing cells")
        elif (cells[unit_nr] != MISSING).any():
            raise SchemaError("unit nonrespondents must have every cell missing")
        if not np.all(np.isfinite(weights)) or (weights < 0).any():
            raise SchemaError("weights must be finite and nonnegative")
        if self.N <= 0:
            raise SchemaError("population size N must be positive")
        if self.weight_kind not in WEIGHT_KINDS:
            raise SchemaError(f"unknown weight kind {self.weight_kind!r}")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        for arr in (cells, unit_nr, weights, pending):
            arr.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "unit_nr", unit_nr)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "weight_pending", pending)
        object.__setattr__(self, "N", int(self.N))

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def n_unit_nr(self) -> int:
        return int(self.unit_nr.sum())

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no variable named {name!r}") from None

    def variable(self, name: str) -> VariableDef:
        return self.variables[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.cells[:, self.index(name)]

    def item_missing(self) -> np.ndarray:
        """Item-nonresponse indicators R (n, K); always False for unit nonrespondents."""
        return (self.cells == MISSING) & ~self.unit_nr[:, None]

    def is_complete(self) -> bool:
        return not (self.cells == MISSING).any()

    def with_cells(self, cells: np.ndarray) -> "SurveyDataset":
        """Completed copy with the same design information and new cells."""
        return replace(self, cells=cells, completed=True)

    def with_weights(self, weights, kind: str) -> "SurveyDataset":
        return replace(self, weights=weights, weight_kind=kind,
                       weight_pending=np.zeros(self.n, dtype=bool))


@dataclass
class MissingnessSummary:
    item_rates: dict[str, float]
    unit_rate: float
    patterns: dict[str, int]


def load_csv(path, schema: CsvSchema, N: int, *, completed: bool = False) -> SurveyDataset:
    """Read a delimited file into a :class:`SurveyDataset`.

    Values in ``schema.missing_codes`` become ``MISSING``.  A row whose survey
    variables are all missing is a unit nonrespondent unless the schema names
    an explicit unit-nonresponse column.  ``completed=True`` reads an imputed
    file, where unit nonrespondents carry values.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: header row required")
        header = set(reader.fieldnames)
        wanted = [schema.column_for(v.name) for v in schema.variables]
        if schema.weight_column:
            wanted.append(schema.weight_column)
        if schema.unit_nr_column:
            wanted.append(schema.unit_nr_column)
        absent = [c for c in wanted if c not in header]
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        rows = list(reader)
    return _from_rows(rows, schema, N, source=str(path), completed=completed)


def _from_rows(rows: Sequence[dict], schema: CsvSchema, N: int, source: str = "<rows>",
               completed: bool = False) -> SurveyDataset:
    K = len(schema.variables)
    n = len(rows)
    cells = np.full((n, K), MISSING, dtype=np.int64)
    weights = np.zeros(n)
    pending = np.zeros(n, dtype=bool)
    unit_nr = np.zeros(n, dtype=bool)
    codes = schema.missing_codes
    for i, row in enumerate(rows):
        for k, var in enumerate(schema.variables):
            col = schema.column_for(var.name)
            raw = (row.get(col) or "").strip()
            if raw in codes:
                continue
            try:
                cells[i, k] = var.index_of(raw)
            except SchemaError as err:
                raise SchemaError(f"{source}: row {i + 1}, column {col!r}: {err}") from None
        if schema.weight_column:
            raw = (row.get(schema.weight_column) or "").strip()
            if raw in codes:
                pending[i] = True
            else:
                try:
                    weights[i] = float(raw)
                except ValueError:
                    raise SchemaError(
                        f"{source}: row {i + 1}: non-numeric weight {raw!r}"
                    ) from None
                if not np.isfinite(weights[i]) or weights[i] < 0:
                    raise SchemaError(f"{source}: row {i + 1}: weight must be nonnegative")
        else:
            pending[i] = True
        if schema.unit_nr_column:
            flag = (row.get(schema.unit_nr_column) or "").strip().lower()
            unit_nr[i] = flag in ("1", "true", "yes", "t")
        else:
            unit_nr[i] = bool(K) and bool((cells[i] == MISSING).all())
    if not completed:
        cells[unit_nr] = MISSING
    return SurveyDataset(tuple(schema.variables), cells, unit_nr, weights, N,
                         weight_kind=schema.weight_kind, weight_pending=pending,
                         completed=completed)


def write_csv(ds: SurveyDataset, path, schema: CsvSchema) -> None:
    """Write ``ds`` in the layout ``load_csv(path, schema, ds.N)`` reads back."""
    missing = "NA" if "NA" in schema.missing_codes else sorted(schema.missing_codes)[0]
    fields = [schema.column_for(v.name) for v in ds.variables]
    if schema.weight_column:
        fields.append(schema.weight_column)
    if schema.unit_nr_column:
        fields.append(schema.unit_nr_column)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        writer.writerow(fields)
        for i in range(ds.n):
            row = [
                missing if c == MISSING else var.levels[c]
                for c, var in zip(ds.cells[i], ds.variables)
            ]
            if schema.weight_column:
                row.append(missing if ds.weight_pending[i] else repr(float(ds.weights[i])))
            if schema.unit_nr_column:
                row.append("1" if ds.unit_nr[i] else "0")
            writer.writerow(row)


def augment_unit_nonrespondents(ds: SurveyDataset, count: int) -> SurveyDataset:
    """Append ``count`` all-missing unit nonrespondents with pending weights."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count == 0:
        return ds
    K = len(ds.variables)
    return SurveyDataset(
        ds.variables,
        np.vstack([ds.cells, np.full((count, K), MISSING, dtype=np.int64)]),
        np.concatenate([ds.unit_nr, np.ones(count, dtype=bool)]),
        np.concatenate([ds.weights, np.zeros(count)]),
        ds.N,
        weight_kind=ds.weight_kind,
        weight_pending=np.concatenate([ds.weight_pending, np.ones(count, dtype=bool)]),
    )


def missingness_summary(ds: SurveyDataset) -> MissingnessSummary:
    resp = ~ds.unit_nr
    n_resp = int(resp.sum())
    R = ds.item_missing()
    rates = {
        v.name: (float(R[resp, k].mean()) if n_resp else 0.0)
        for k, v in enumerate(ds.variables)
    }
    keys: Iterable[str] = (
        "U" if ds.unit_nr[i] else "".join("1" if r else "0" for r in R[i])
        for i in range(ds.n)
    )
    return MissingnessSummary(
        item_rates=rates,
        unit_rate=ds.n_unit_nr / ds.n if ds.n else 0.0,
        patterns=dict(sorted(Counter(keys).items())),
    )
