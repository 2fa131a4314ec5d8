"""The transformation catalog: typed, unit-aware feature constructors.

Every transform is total: a cell whose operands are absent, or that falls
outside the transform's domain (``log`` of a non-positive value, division by
zero, ...), becomes an absent cell. No transform raises on data.

Generated feature names follow ``id(op1,op2,...)``; transforms that take a
parameter write it in brackets, ``one_hot[Paris](city)`` or
``triple_lookup[population](city)``. :func:`parse_feature_name` inverts this.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import units as U
from .tabular import Column, Dataset, calendar_fields

UNKNOWN = "Unknown"

# is_rush_hour covers [7, 10) and [16, 19) on the stamp's own clock
RUSH_HOURS = ((7, 10), (16, 19))
ONE_HOT_MAX_LEVELS = 20
ONE_HOT_OTHER = "other"
EARTH_RADIUS_KM = 6371.0

# default Inter(t) by weight class, used when the knowledge base sets none
DEFAULT_CLASS_WEIGHTS = {
    "arithmetic": 0.95,
    "date": 0.95,
    "geo": 0.95,
    "unary_math": 0.90,
    "aggregation": 0.85,
    "logical": 0.90,
    "one_hot": 0.95,
    "lookup": 0.95,
}

NUM = frozenset({"numeric"})
CAT = frozenset({"categorical"})
BOOL = frozenset({"boolean"})
DATE = frozenset({"datetime"})
LAT = frozenset({"geo_lat"})
LON = frozenset({"geo_lon"})


class UnitResult(NamedTuple):
    unit: str | None
    valid: bool


@dataclass(frozen=True)
class Transform:
    id: str
    arity: str  # 1, 2, aggregation, date, geo, lookup
    input_dtypes: tuple[frozenset, ...]
    output_dtype: str
    weight_class: str
    unit_law: Callable[[Sequence[str | None]], UnitResult]
    unit_law_doc: str
    fn: Callable
    parametric: bool = False

    @property
    def n_operands(self) -> int:
        return len(self.input_dtypes)

    def name_for(self, operands: Sequence[str], param: str | None = None) -> str:
        head = self.id if param is None else f"{self.id}[{param}]"
        return f"{head}({','.join(operands)})"


@dataclass(frozen=True)
class TransformCatalog:
    transforms: tuple[Transform, ...]
    classes: dict

    def __post_init__(self):
        ids = [t.id for t in self.transforms]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate transform ids")

    def __getitem__(self, tid: str) -> Transform:
        for t in self.transforms:
            if t.id == tid:
                return t
        raise KeyError(tid)

    def __contains__(self, tid: str) -> bool:
        return any(t.id == tid for t in self.transforms)

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.transforms]

    def actions(self) -> list[Transform]:
        """Transforms available to the search agent, in action-index order."""
        return [t for t in self.transforms if t.arity != "lookup"]

    def members(self, cls: str) -> list[str]:
        return list(self.classes.get(cls, ()))

    def describe(self) -> list[dict]:
        return [
            {
                "id": t.id,
                "arity": t.arity,
                "n_operands": t.n_operands,
                "dtypes": [sorted(s) for s in t.input_dtypes],
                "output_dtype": t.output_dtype,
                "unit_law": t.unit_law_doc,
            }
            for t in self.transforms
        ]


# --------------------------------------------------------------------------
# unit laws


def _none(units):
    return UnitResult(None, True)


def _power(p):
    return lambda units: UnitResult(U.power(units[0], p), True)


def _additive(units):
    if U.units_differ(units):
        return UnitResult(None, False)
    known = [u for u in units if u is not None]
    return UnitResult(U.normalize(known[0]) if known else None, True)


def _mul(units):
    return UnitResult(U.multiply(units[0], units[1]), True)


def _div(units):
    return UnitResult(U.multiply(units[0], units[1], -1), True)


def _agg_value(units):
    return UnitResult(units[1], True)


def _const(unit):
    return lambda units: UnitResult(unit, True)


# --------------------------------------------------------------------------
# kernels; each returns a list of (values, param) pairs


def _elementwise(f, domain=None):
    def run(cols, d, **_):
        x = cols[0].values
        out = np.full(x.shape, np.nan)
        ok = np.isfinite(x)
        if domain is not None:
            ok &= domain(np.where(ok, x, 0.0))
        with np.errstate(all="ignore"):
            out[ok] = f(x[ok])
        return [(out, None)]
    return run


def _binary(f, domain=None):
    def run(cols, d, **_):
        a, b = cols[0].values, cols[1].values
        out = np.full(a.shape, np.nan)
        ok = np.isfinite(a) & np.isfinite(b)
        if domain is not None:
            ok &= domain(np.where(ok, a, 0.0), np.where(ok, b, 0.0))
        with np.errstate(all="ignore"):
            out[ok] = f(a[ok], b[ok])
        out[~np.isfinite(out)] = np.nan
        return [(out, None)]
    return run


def _one_hot(cols, d, **_):
    vals = cols[0].values
    present = [v for v in vals if v is not None]
    counts: dict[str, int] = {}
    for v in present:
        counts[v] = counts.get(v, 0) + 1
    levels = sorted(counts, key=lambda v: (-counts[v], v))
    kept, rest = levels[:ONE_HOT_MAX_LEVELS], set(levels[ONE_HOT_MAX_LEVELS:])
    absent = np.array([v is None for v in vals])
    out = []
    for lvl in kept:
        col = np.array([v == lvl for v in vals], dtype=np.float64)
        col[absent] = np.nan
        out.append((col, _safe_param(lvl)))
    if rest or not kept:
        col = np.array([v in rest for v in vals], dtype=np.float64)
        col[absent] = np.nan
        out.append((col, ONE_HOT_OTHER))
    return out


def _safe_param(s: str) -> str:
    return "".join("_" if ch in "[](),\n\r" else ch for ch in s)


def _group_by(reducer):
    def run(cols, d, **_):
        keys, vals = cols[0].values, cols[1].values
        out = np.full(len(vals), np.nan)
        groups: dict[str, list[int]] = {}
        for i, k in enumerate(keys):
            if k is not None:
                groups.setdefault(k, []).append(i)
        for rows in groups.values():
            idx = np.asarray(rows)
            v = vals[idx]
            v = v[np.isfinite(v)]
            agg = reducer(v)
            if agg is not None:
                out[idx] = agg
        return [(out, None)]
    return run


def _mean(v):
    return float(np.mean(v)) if len(v) else None


def _sum(v):
    return float(np.sum(v)) if len(v) else None


def _min(v):
    return float(np.min(v)) if len(v) else None


def _max(v):
    return float(np.max(v)) if len(v) else None


def _count(v):
    return float(len(v))


def _calendar(field_name):
    def run(cols, d, **_):
        return [(calendar_fields(cols[0].values)[field_name], None)]
    return run


def _is_weekend(cols, d, **_):
    wd = calendar_fields(cols[0].values)["weekday"]
    out = np.where(np.isnan(wd), np.nan, (wd >= 5).astype(np.float64))
    return [(out, None)]


def _is_rush_hour(cols, d, **_):
    hr = calendar_fields(cols[0].values)["hour"]
    hit = np.zeros(hr.shape, dtype=bool)
    for lo, hi in RUSH_HOURS:
        hit |= (hr >= lo) & (hr < hi)
    return [(np.where(np.isnan(hr), np.nan, hit.astype(np.float64)), None)]


def _haversine(cols, d, **_):
    lat1, lon1, lat2, lon2 = (np.radians(c.values) for c in cols)
    with np.errstate(invalid="ignore"):
        a = (np.sin((lat2 - lat1) / 2.0) ** 2
             + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
        dist = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return [(dist, None)]


def _triple_lookup(cols, d, kb=None, param=None, **_):
    if kb is None or param is None:
        return [(np.array([None] * len(cols[0]), dtype=object), param)]
    src = cols[0]
    cache: dict = {}
    found = []
    for v in src.values:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            found.append(None)
            continue
        key = _entity_key(v)
        if key not in cache:
            objs = kb.lookup_related(key, param)
            cache[key] = objs[0] if objs else None
        found.append(cache[key])
    present = [f for f in found if f is not None]
    if present and all(isinstance(f, (int, float)) for f in present):
        return [(np.array([np.nan if f is None else float(f) for f in found]), param)]
    return [(np.array([None if f is None else str(f) for f in found], dtype=object), param)]


def _entity_key(v) -> str:
    if isinstance(v, float) and v == int(v):
        v = int(v)
    return str(v)


# --------------------------------------------------------------------------


def builtin_catalog() -> TransformCatalog:
    T = Transform
    pos = lambda x: x > 0  # noqa: E731
    nonneg = lambda x: x >= 0  # noqa: E731
    nonzero = lambda x: x != 0  # noqa: E731
    transforms = (
        T("log", "1", (NUM,), "numeric", "unary_math", _none, "dimensionless",
          _elementwise(np.log, pos)),
        T("sqrt", "1", (NUM,), "numeric", "unary_math", _power(Fraction(1, 2)), "u^(1/2)",
          _elementwise(np.sqrt, nonneg)),
        T("square", "1", (NUM,), "numeric", "unary_math", _power(2), "u^2",
          _elementwise(np.square)),
        T("reciprocal", "1", (NUM,), "numeric", "unary_math", _power(-1), "u^-1",
          _elementwise(lambda x: 1.0 / x, nonzero)),
        T("one_hot", "1", (CAT,), "boolean", "one_hot", _none, "dimensionless",
          _one_hot, parametric=True),
        T("add", "2", (NUM, NUM), "numeric", "arithmetic", _additive, "u + u -> u; differing units invalid",
          _binary(np.add)),
        T("sub", "2", (NUM, NUM), "numeric", "arithmetic", _additive, "u - u -> u; differing units invalid",
          _binary(np.subtract)),
        T("mul", "2", (NUM, NUM), "numeric", "arithmetic", _mul, "u * v",
          _binary(np.multiply)),
        T("div", "2", (NUM, NUM), "numeric", "arithmetic", _div, "u / v",
          _binary(np.divide, lambda a, b: b != 0)),
        T("and", "2", (BOOL, BOOL), "boolean", "logical", _none, "dimensionless",
          _binary(lambda a, b: ((a != 0) & (b != 0)).astype(np.float64))),
        T("or", "2", (BOOL, BOOL), "boolean", "logical", _none, "dimensionless",
          _binary(lambda a, b: ((a != 0) | (b != 0)).astype(np.float64))),
        T("group_by_mean", "aggregation", (CAT, NUM), "numeric", "aggregation", _agg_value,
          "unit of value column", _group_by(_mean)),
        T("group_by_sum", "aggregation", (CAT, NUM), "numeric", "aggregation", _agg_value,
          "unit of value column", _group_by(_sum)),
        T("group_by_min", "aggregation", (CAT, NUM), "numeric", "aggregation", _agg_value,
          "unit of value column", _group_by(_min)),
        T("group_by_max", "aggregation", (CAT, NUM), "numeric", "aggregation", _agg_value,
          "unit of value column", _group_by(_max)),
        T("group_by_count", "aggregation", (CAT, NUM), "numeric", "aggregation", _none,
          "dimensionless", _group_by(_count)),
        T("extract_day", "date", (DATE,), "numeric", "date", _none, "dimensionless",
          _calendar("day")),
        T("extract_month", "date", (DATE,), "numeric", "date", _none, "dimensionless",
          _calendar("month")),
        T("extract_year", "date", (DATE,), "numeric", "date", _none, "dimensionless",
          _calendar("year")),
        T("is_weekend", "date", (DATE,), "boolean", "date", _none, "dimensionless", _is_weekend),
        T("is_rush_hour", "date", (DATE,), "boolean", "date", _none, "dimensionless", _is_rush_hour),
        T("time_diff_hours", "date", (DATE, DATE), "numeric", "date", _const("hour"), "hour",
          _binary(lambda a, b: (a - b) / 3600.0)),
        T("haversine_km", "geo", (LAT, LON, LAT, LON), "numeric", "geo", _const("kilometre"),
          "kilometre", _haversine),
        T("triple_lookup", "lookup", (frozenset({"categorical", "numeric"}),), "categorical", "lookup",
          _none, "dimensionless", _triple_lookup, parametric=True),
    )
    classes = {
        "arith": ("add", "sub", "mul", "div"),
        "agg": ("group_by_mean", "group_by_sum", "group_by_min", "group_by_max", "group_by_count"),
        "unary": ("log", "sqrt", "square", "reciprocal", "one_hot"),
        "logical": ("and", "or"),
        "date": ("extract_day", "extract_month", "extract_year", "is_weekend", "is_rush_hour",
                 "time_diff_hours"),
        "geo": ("haversine_km",),
        "lookup": ("triple_lookup",),
    }
    return TransformCatalog(transforms, classes)


CATALOG = builtin_catalog()


def default_interp_weights(catalog: TransformCatalog = CATALOG) -> dict[str, float]:
    return {t.id: DEFAULT_CLASS_WEIGHTS[t.weight_class] for t in catalog.transforms}


# --------------------------------------------------------------------------
# operands and application


class OperandTuple(NamedTuple):
    names: tuple[str, ...]
    interpretable: bool


def _candidate_tuples(t: Transform, feats: list[Column], check_dtypes: bool):
    if not check_dtypes:
        yield from itertools.permutations(range(len(feats)), t.n_operands)
        return
    if t.arity == "geo":
        lats = [i for i, c in enumerate(feats) if c.dtype == "geo_lat"]
        lons = [i for i, c in enumerate(feats) if c.dtype == "geo_lon"]
        points = list(zip(lats, lons))
        for p, q in itertools.permutations(points, 2):
            yield (*p, *q)
        return
    pools = [[i for i, c in enumerate(feats) if c.dtype in dts] for dts in t.input_dtypes]
    for combo in itertools.product(*pools):
        if len(set(combo)) == len(combo):
            yield combo


def applicable_operands(t: Transform, d: Dataset, kb=None, *, check_dtypes: bool = True,
                        features: Sequence[str] | None = None) -> list[OperandTuple]:
    """All ordered operand tuples for ``t`` over the features of ``d``.

    Tuples whose unit law fails or that match a non-interpretability rule of
    ``kb`` are returned with ``interpretable=False``. ``features`` restricts
    the operand pool (defaults to every non-target column).
    """
    from .reasoner import check_interpretability_rules

    pool = d.feature_names if features is None else [f for f in features if f in d and f != d.target]
    feats = [d[n] for n in pool]
    out = []
    for combo in _candidate_tuples(t, feats, check_dtypes):
        cols = [feats[i] for i in combo]
        ok = t.unit_law([c.unit for c in cols]).valid
        if ok and kb is not None:
            ok = check_interpretability_rules(kb, t.id, cols) == "interpretable"
        out.append(OperandTuple(tuple(c.name for c in cols), ok))
    return out


def has_operands(t: Transform, d: Dataset, features: Sequence[str] | None = None) -> bool:
    """Whether ``t`` has at least one dtype-compatible operand tuple."""
    pool = d.feature_names if features is None else [f for f in features if f in d and f != d.target]
    return next(_candidate_tuples(t, [d[n] for n in pool], True), None) is not None


def apply(t: Transform, operands: Sequence[Column], d: Dataset, *, kb=None,
          param: str | None = None) -> list[Column]:
    """Apply ``t`` and return its output column(s).

    Single-output transforms return a one-element list; ``one_hot`` returns
    one indicator column per kept level.
    """
    if len(operands) != t.n_operands:
        raise ValueError(f"{t.id} takes {t.n_operands} operands, got {len(operands)}")
    unit = t.unit_law([c.unit for c in operands]).unit
    names = [c.name for c in operands]
    out = []
    for values, p in t.fn(list(operands), d, kb=kb, param=param):
        dtype = t.output_dtype
        if t.arity == "lookup":
            dtype = "categorical" if values.dtype == object else "numeric"
        out.append(Column(t.name_for(names, p if t.parametric else None), dtype, values,
                          concept=UNKNOWN, unit=unit))
    return out


# --------------------------------------------------------------------------
# feature-name grammar


def _split_args(s: str) -> list[str] | None:
    args, depth, buf = [], 0, ""
    for ch in s:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
            if depth < 0:
                return None
        if ch == "," and depth == 0:
            args.append(buf)
            buf = ""
        else:
            buf += ch
    if depth != 0:
        return None
    args.append(buf)
    return args


def parse_feature_name(name: str, catalog: TransformCatalog = CATALOG):
    """Split a generated name into ``(transform_id, param, operand_names)``.

    Returns ``None`` for names that are not a transform application.
    """
    i = name.find("(")
    if i <= 0 or not name.endswith(")"):
        return None
    head, inner = name[:i], name[i + 1:-1]
    param = None
    if head.endswith("]") and "[" in head:
        j = head.index("[")
        head, param = head[:j], head[j + 1:-1]
    if head not in catalog:
        return None
    t = catalog[head]
    args = _split_args(inner)
    if args is None or len(args) != t.n_operands or any(a == "" for a in args):
        return None
    if (param is not None) != t.parametric:
        return None
    return head, param, args
