"""Tabular data model: typed columns, CSV ingestion, and cross-validation folds.

Datasets are immutable. Every operation that "changes" a dataset returns a new
one, so that each search state can be replayed later.

Storage conventions:

* numeric, datetime, boolean, geo_lat and geo_lon columns are ``float64``
  arrays with ``NaN`` marking an absent cell (datetime cells hold epoch
  seconds, UTC, naive stamps treated as UTC);
* categorical columns are ``object`` arrays of ``str`` with ``None`` marking
  an absent cell.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DTYPES = ("numeric", "categorical", "datetime", "geo_lat", "geo_lon", "boolean")
FLOAT_DTYPES = frozenset({"numeric", "datetime", "geo_lat", "geo_lon", "boolean"})
TASKS = ("regression", "classification")

# Fraction of non-empty cells that must parse as numbers for a column to be numeric.
NUMERIC_THRESHOLD = 0.95

_ISO_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}"
    r"(?:[T ]\d{2}:\d{2}(?::\d{2}(?:\.\d{1,6})?)?)?"
    r"(?:Z|[+-]\d{2}:?\d{2})?$"
)
_TRUE = frozenset({"true", "t", "yes", "y", "1", "1.0"})
_FALSE = frozenset({"false", "f", "no", "n", "0", "0.0"})
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class TabularError(Exception):
    """Base class for data ingestion and dataset errors."""


class UnreadableFileError(TabularError):
    pass


class EmptyFileError(TabularError):
    pass


class DuplicateHeaderError(TabularError):
    pass


class MalformedCsvError(TabularError):
    pass


class TargetMissingError(TabularError):
    def __init__(self, column: str):
        super().__init__(f"target column {column!r} not found")
        self.column = column


class LengthMismatchError(TabularError):
    pass


class FoldError(TabularError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Column:
    name: str
    dtype: str
    values: np.ndarray
    concept: str | None = None
    unit: str | None = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise TabularError(f"unknown dtype {self.dtype!r} for column {self.name!r}")
        if self.dtype in FLOAT_DTYPES:
            vals = np.array(self.values, dtype=np.float64)
            vals[~np.isfinite(vals)] = np.nan
        else:
            vals = np.empty(len(self.values), dtype=object)
            for i, v in enumerate(self.values):
                vals[i] = None if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
        object.__setattr__(self, "values", _freeze(vals))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def absent(self) -> np.ndarray:
        """Boolean mask of absent cells."""
        if self.dtype in FLOAT_DTYPES:
            return np.isnan(self.values)
        return np.array([v is None for v in self.values], dtype=bool)

    def annotated(self, concept: str | None, unit: str | None) -> "Column":
        return replace(self, concept=concept, unit=unit)

    def renamed(self, name: str) -> "Column":
        return replace(self, name=name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Column):
            return NotImplemented
        if (self.name, self.dtype, self.concept, self.unit) != (
            other.name, other.dtype, other.concept, other.unit
        ):
            return False
        if len(self) != len(other):
            return False
        if self.dtype in FLOAT_DTYPES:
            return bool(np.array_equal(self.values, other.values, equal_nan=True))
        return list(self.values) == list(other.values)

    __hash__ = None  # type: ignore[assignment]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.name, self.dtype, self.concept, self.unit)).encode())
        if self.dtype in FLOAT_DTYPES:
            h.update(self.values.tobytes())
        else:
            h.update(json.dumps(list(self.values)).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Dataset:
    columns: tuple[Column, ...]
    target: str
    task: str
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "provenance", dict(self.provenance))
        if not cols:
            raise TabularError("dataset has no columns")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DuplicateHeaderError(f"duplicate column names: {dup}")
        lengths = {len(c) for c in cols}
        if len(lengths) != 1 or 0 in lengths:
            raise LengthMismatchError(f"columns have differing or zero lengths: {sorted(lengths)}")
        if self.target not in names:
            raise TargetMissingError(self.target)
        if len(cols) < 2:
            raise TabularError("dataset needs at least one feature besides the target")
        if self.task not in TASKS:
            raise TabularError(f"unknown task {self.task!r}")

    @property
    def n_rows(self) -> int:
        return len(self.columns[0])

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns if c.name != self.target]

    @property
    def features(self) -> list[Column]:
        return [c for c in self.columns if c.name != self.target]

    @property
    def target_column(self) -> Column:
        return self[self.target]

    def __getitem__(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def with_columns(self, columns: Iterable[Column], provenance: Mapping[str, str] | None = None) -> "Dataset":
        return Dataset(tuple(columns), self.target, self.task,
                       self.provenance if provenance is None else provenance)

    def take_rows(self, rows: np.ndarray) -> "Dataset":
        cols = [replace(c, values=c.values[rows]) for c in self.columns]
        return self.with_columns(cols)

    def select(self, feature_names: Sequence[str]) -> "Dataset":
        keep = set(feature_names) | {self.target}
        return self.with_columns(
            [c for c in self.columns if c.name in keep],
            {k: v for k, v in self.provenance.items() if k in keep},
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.target == other.target
            and self.task == other.task
            and len(self.columns) == len(other.columns)
            and all(a == b for a, b in zip(self.columns, other.columns))
        )

    __hash__ = None  # type: ignore[assignment]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.target, self.task, sorted(self.provenance.items()))).encode())
        for c in self.columns:
            h.update(c.digest().encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "assignments", _freeze(np.asarray(self.assignments, dtype=np.int64)))

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (train_rows, test_rows) index arrays for one fold."""
        test = self.assignments == fold
        return np.flatnonzero(~test), np.flatnonzero(test)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


# --------------------------------------------------------------------------
# cell parsing


def parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def parse_datetime(cell: str) -> float | None:
    """Parse an ISO-8601 stamp into epoch seconds (naive stamps read as UTC)."""
    s = cell.strip()
    if not _ISO_RE.match(s):
        return None
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _EPOCH).total_seconds()


def format_datetime(epoch: float) -> str:
    dt = datetime.fromtimestamp(epoch, tz=timezone.utc).replace(tzinfo=None)
    return dt.isoformat(timespec="microseconds" if dt.microsecond else "seconds")


def parse_boolean(cell: str) -> float | None:
    s = cell.strip().lower()
    if s in _TRUE:
        return 1.0
    if s in _FALSE:
        return 0.0
    return None


def calendar_fields(epoch: np.ndarray) -> dict[str, np.ndarray]:
    """Calendar fields of epoch-second values; absent cells stay NaN.

    Returns year, month, day, hour, and weekday (Monday=0).
    """
    epoch = np.asarray(epoch, dtype=np.float64)
    ok = np.isfinite(epoch)
    out = {k: np.full(epoch.shape, np.nan) for k in ("year", "month", "day", "hour", "weekday")}
    if not ok.any():
        return out
    secs = epoch[ok]
    days = np.floor(secs / 86400.0).astype(np.int64)
    d64 = days.astype("datetime64[D]")
    years = d64.astype("datetime64[Y]")
    months = d64.astype("datetime64[M]")
    out["year"][ok] = years.astype(np.int64) + 1970
    out["month"][ok] = (months - years.astype("datetime64[M]")).astype(np.int64) + 1
    out["day"][ok] = (d64 - months.astype("datetime64[D]")).astype(np.int64) + 1
    out["hour"][ok] = np.floor((secs - days * 86400.0) / 3600.0)
    # 1970-01-01 was a Thursday
    out["weekday"][ok] = (days + 3) % 7
    return out


def _infer_dtype(cells: list[str]) -> str:
    filled = [c for c in cells if c.strip() != ""]
    if not filled:
        return "categorical"
    n_num = sum(parse_float(c) is not None for c in filled)
    if n_num >= NUMERIC_THRESHOLD * len(filled):
        return "numeric"
    if all(parse_datetime(c) is not None for c in filled):
        return "datetime"
    return "categorical"


def _parse_cells(cells: list[str], dtype: str) -> list:
    if dtype == "categorical":
        return [c if c.strip() != "" else None for c in cells]
    parser = {"datetime": parse_datetime, "boolean": parse_boolean}.get(dtype, parse_float)
    out = []
    for c in cells:
        v = parser(c) if c.strip() != "" else None
        if v is not None and dtype == "geo_lat" and not -90.0 <= v <= 90.0:
            v = None
        if v is not None and dtype == "geo_lon" and not -180.0 <= v <= 180.0:
            v = None
        out.append(np.nan if v is None else v)
    return out


def infer_task(col: Column) -> str:
    """Categorical/boolean or two-valued integer targets are classification."""
    if col.dtype in ("categorical", "boolean"):
        return "classification"
    vals = col.values[~np.isnan(col.values)]
    uniq = np.unique(vals)
    if len(uniq) == 2 and np.all(uniq == np.round(uniq)):
        return "classification"
    return "regression"


def load_schema_hints(path: str | Path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        hints = json.load(fh)
    if not isinstance(hints, dict):
        raise TabularError("schema hints must be a JSON object")
    for name, h in hints.items():
        if not isinstance(h, dict):
            raise TabularError(f"schema hint for {name!r} must be an object")
        unknown = set(h) - {"dtype", "unit", "concept"}
        if unknown:
            raise TabularError(f"schema hint for {name!r} has unknown keys {sorted(unknown)}")
        if "dtype" in h and h["dtype"] not in DTYPES:
            raise TabularError(f"schema hint for {name!r} has unknown dtype {h['dtype']!r}")
    return hints


def load_csv(
    path: str | Path,
    target: str,
    schema: Mapping[str, Mapping] | None = None,
    task: str | None = None,
) -> Dataset:
    """Read a headered UTF-8 CSV into a Dataset.

    ``schema`` maps column names to ``{"dtype", "unit", "concept"}`` and
    overrides inference. ``task`` is inferred from the target when omitted.
    """
    schema = schema or {}
    try:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise EmptyFileError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise DuplicateHeaderError(f"{path}: duplicate headers {dup}")
    if target not in header:
        raise TargetMissingError(target)
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise MalformedCsvError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")

    columns = []
    for j, name in enumerate(header):
        cells = [r[j] for r in rows[1:]]
        hint = schema.get(name, {})
        dtype = hint.get("dtype") or _infer_dtype(cells)
        columns.append(Column(name, dtype, _parse_cells(cells, dtype),
                              concept=hint.get("concept"), unit=hint.get("unit")))
    tcol = next(c for c in columns if c.name == target)
    return Dataset(tuple(columns), target, task or infer_task(tcol))


def _format_cell(col: Column, v) -> str:
    if col.dtype == "categorical":
        return "" if v is None else v
    if math.isnan(v):
        return ""
    if col.dtype == "datetime":
        return format_datetime(v)
    if col.dtype == "boolean":
        return "1" if v else "0"
    return repr(float(v))


def write_csv(d: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(d.names)
        for i in range(d.n_rows):
            w.writerow([_format_cell(c, c.values[i]) for c in d.columns])


def schema_of(d: Dataset) -> dict[str, dict]:
    """Schema hints that reload a written dataset with identical dtypes and annotations."""
    out = {}
    for c in d.columns:
        h = {"dtype": c.dtype}
        if c.unit is not None:
            h["unit"] = c.unit
        if c.concept is not None:
            h["concept"] = c.concept
        out[c.name] = h
    return out


# --------------------------------------------------------------------------
# folds and growth


def make_folds(d: Dataset, k: int, seed: int) -> FoldPlan:
    """Seeded k-fold assignment; stratified for classification when every class has >= k rows."""
    n = d.n_rows
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    if k > n:
        raise FoldError(f"k={k} exceeds number of rows {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    if d.task == "classification":
        labels = d.target_column.values
        keys = np.array(["\x00absent" if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
                         for v in labels], dtype=object)
        classes, counts = np.unique(keys, return_counts=True)
        if counts.min() >= k:
            # group rows by class while keeping the shuffled order within each class
            rank = {c: i for i, c in enumerate(classes)}
            cls_of = np.array([rank[keys[i]] for i in order])
            order = order[np.argsort(cls_of, kind="stable")]
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k, assignments, seed)


def unique_name(existing: Iterable[str], name: str) -> str:
    taken = set(existing)
    if name not in taken:
        return name
    i = 2
    while f"{name}_{i}" in taken:
        i += 1
    return f"{name}_{i}"


def append_feature(d: Dataset, col: Column, origin: str) -> Dataset:
    """Return a copy of ``d`` with ``col`` added and its provenance recorded."""
    if len(col) != d.n_rows:
        raise LengthMismatchError(f"column {col.name!r} has {len(col)} cells, dataset has {d.n_rows}")
    name = unique_name(d.names, col.name)
    if name != col.name:
        col = col.renamed(name)
    prov = dict(d.provenance)
    prov[name] = origin
    return d.with_columns((*d.columns, col), prov)
