"""Knowledge base and its line-oriented rule language.

One statement per line; ``#`` starts a comment; a trailing ``;`` or ``.`` is
optional::

    concept Mass
    concept Stock "Periodic inventory total"
    unit kilogram dim mass
    map weight -> concept:Mass unit:kilogram
    map *_datetime -> concept:Date
    derive Date => Day via extract_day, Month via extract_month, Year via extract_year
    derive City => PopulationTotal via triple_lookup(population)
    derive Date => Weekend via is_weekend when dtype_is(datetime)
    noninterp add when units_differ
    noninterp class:agg when concept_is(Stock)
    triple (Paris, population, 2148000)
    interp_weight log 0.9

Concepts, units and transform ids may be referenced before they are
declared; all references are resolved after the whole file is read.
"""

from __future__ import annotations

import fnmatch
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .tabular import DTYPES, Dataset
from .transforms import CATALOG, UNKNOWN, TransformCatalog, default_interp_weights

Literal = Union[str, int, float]

_ID = r"[A-Za-z_][\w.-]*"
_PRED_RE = re.compile(r"^(units_differ)$|^(unit_is|concept_is|dtype_is)\(\s*(" + _ID + r")\s*\)$")
_GUARD_PREDS = {"dtype_is", "unit_is"}
_RULE_PREDS = {"units_differ", "unit_is", "concept_is"}


class KGError(Exception):
    """Knowledge-base error with a 1-based source position."""

    def __init__(self, message: str, path: str = "<string>", line: int = 0, col: int = 0):
        self.message, self.path, self.line, self.col = message, path, line, col
        super().__init__(f"{path}:{line}:{col}: {message}" if line else f"{path}: {message}")


class KGSyntaxError(KGError):
    pass


class UnknownReferenceError(KGError):
    pass


class DuplicateConceptError(KGError):
    pass


class ScoreRangeError(KGError):
    pass


class AmbiguousMappingError(KGError):
    def __init__(self, column: str, candidates):
        self.column, self.candidates = column, list(candidates)
        listed = "; ".join(f"{p!r} -> {c}" for p, c in self.candidates)
        super().__init__(f"column {column!r} matches mappings with different concepts: {listed}", "<mapping>")


@dataclass(frozen=True)
class Predicate:
    name: str
    arg: str | None = None

    def __str__(self) -> str:
        return self.name if self.arg is None else f"{self.name}({self.arg})"


@dataclass(frozen=True)
class Product:
    concept: str
    transform: str
    param: str | None = None

    def __str__(self) -> str:
        via = self.transform if self.param is None else f"{self.transform}({self.param})"
        return f"{self.concept} via {via}"


@dataclass(frozen=True)
class DerivationRule:
    id: str
    head: str
    products: tuple[Product, ...]
    guard: tuple[Predicate, ...] = ()


@dataclass(frozen=True)
class InterpRule:
    id: str
    pattern: str  # transform id or "class:<name>"
    constraints: tuple[Predicate, ...]
    verdict: str = "non_interpretable"


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: Literal


@dataclass(frozen=True)
class ColumnMapping:
    pattern: str
    concept: str
    unit: str | None = None


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    concepts: dict = field(default_factory=dict)  # id -> label
    units: dict = field(default_factory=dict)  # id -> dimension group
    column_mappings: tuple[ColumnMapping, ...] = ()
    derivation_rules: tuple[DerivationRule, ...] = ()
    interp_rules: tuple[InterpRule, ...] = ()
    triples: tuple[Triple, ...] = ()
    transform_interp: dict = field(default_factory=dict)  # explicit interp_weight entries

    def __post_init__(self):
        concepts = dict(self.concepts)
        concepts.setdefault(UNKNOWN, UNKNOWN)
        object.__setattr__(self, "concepts", concepts)
        index: dict[tuple[str, str], list] = {}
        for t in self.triples:
            index.setdefault((_norm(t.subject), _norm(t.predicate)), []).append(t.object)
        object.__setattr__(self, "_index", index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (self.concepts, self.units, self.column_mappings, self.derivation_rules,
                self.interp_rules, self.triples, self.transform_interp) == (
            other.concepts, other.units, other.column_mappings, other.derivation_rules,
            other.interp_rules, other.triples, other.transform_interp)

    __hash__ = None  # type: ignore[assignment]

    def interp_weights(self, catalog: TransformCatalog = CATALOG) -> dict[str, float]:
        """Effective Inter(t) for every transform: defaults overlaid with explicit weights."""
        w = default_interp_weights(catalog)
        w.update(self.transform_interp)
        return w

    @property
    def dimension_groups(self) -> list[str]:
        return sorted(set(self.units.values()))

    def unit_dimension(self, unit: str | None) -> str | None:
        return self.units.get(unit) if unit is not None else None

    def lookup_related(self, entity: str, predicate: str) -> list:
        """Objects of triples ``(entity, predicate, ?)`` in file order.

        Entity and predicate match case-insensitively after trimming.
        """
        return list(self._index.get((_norm(entity), _norm(predicate)), ()))

    def rules_for(self, concept: str) -> list[DerivationRule]:
        return [r for r in self.derivation_rules if r.head == concept]


def _norm(s) -> str:
    return str(s).strip().casefold()


# --------------------------------------------------------------------------
# parsing


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).rstrip()


def _literal(tok: str) -> Literal:
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == tok[-1] == '"':
        return tok[1:-1]
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        return tok


def _text(tok: str) -> str:
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == tok[-1] == '"':
        return tok[1:-1]
    return tok


def _split_commas(s: str) -> list[str]:
    parts, buf, quoted, depth = [], "", False, 0
    for ch in s:
        if ch == '"':
            quoted = not quoted
        elif not quoted and ch == "(":
            depth += 1
        elif not quoted and ch == ")":
            depth -= 1
        if ch == "," and not quoted and depth == 0:
            parts.append(buf)
            buf = ""
        else:
            buf += ch
    parts.append(buf)
    return parts


class _Parser:
    def __init__(self, text: str, path: str, catalog: TransformCatalog):
        self.text, self.path, self.catalog = text, path, catalog
        self.concepts: dict[str, str] = {}
        self.units: dict[str, str] = {}
        self.mappings: list[ColumnMapping] = []
        self.derivations: list[DerivationRule] = []
        self.interp: list[InterpRule] = []
        self.triples: list[Triple] = []
        self.weights: dict[str, float] = {}
        # deferred reference checks: (kind, name, line, col)
        self.refs: list[tuple[str, str, int, int]] = []

    def err(self, cls, msg, line, raw, needle=None):
        col = raw.find(needle) + 1 if needle and needle in raw else 1
        raise cls(msg, self.path, line, col)

    def parse(self) -> KnowledgeBase:
        for lineno, raw in enumerate(self.text.splitlines(), start=1):
            stmt = _strip_comment(raw).strip()
            if stmt.endswith((";", ".")):
                stmt = stmt[:-1].rstrip()
            if not stmt:
                continue
            keyword = stmt.split(None, 1)[0]
            handler = getattr(self, "_" + keyword, None)
            if keyword.startswith("_") or handler is None:
                self.err(KGSyntaxError, f"unknown statement {keyword!r}", lineno, raw, keyword)
            handler(stmt[len(keyword):].strip(), lineno, raw)
        self._resolve()
        return KnowledgeBase(dict(self.concepts), dict(self.units), tuple(self.mappings),
                             tuple(self.derivations), tuple(self.interp), tuple(self.triples),
                             dict(self.weights))

    def _concept(self, rest, line, raw):
        m = re.fullmatch(rf"({_ID})(?:\s+\"([^\"]*)\")?", rest)
        if not m:
            self.err(KGSyntaxError, "expected: concept <Id> [\"label\"]", line, raw)
        cid = m.group(1)
        if cid in self.concepts or cid == UNKNOWN:
            self.err(DuplicateConceptError, f"duplicate concept {cid!r}", line, raw, cid)
        self.concepts[cid] = m.group(2) if m.group(2) is not None else cid

    def _unit(self, rest, line, raw):
        m = re.fullmatch(rf"({_ID})\s+dim\s+({_ID})", rest)
        if not m:
            self.err(KGSyntaxError, "expected: unit <Id> dim <Group>", line, raw)
        uid = m.group(1)
        if uid in self.units:
            self.err(DuplicateConceptError, f"duplicate unit {uid!r}", line, raw, uid)
        self.units[uid] = m.group(2)

    def _map(self, rest, line, raw):
        m = re.fullmatch(rf"(\S+)\s*->\s*concept:({_ID})(?:\s+unit:({_ID}))?", rest)
        if not m:
            self.err(KGSyntaxError, "expected: map <pattern> -> concept:<Id> [unit:<Id>]", line, raw)
        self.refs.append(("concept", m.group(2), line, raw.find("concept:") + 9))
        if m.group(3):
            self.refs.append(("unit", m.group(3), line, raw.find("unit:") + 6))
        self.mappings.append(ColumnMapping(m.group(1), m.group(2), m.group(3)))

    def _derive(self, rest, line, raw):
        m = re.fullmatch(rf"({_ID})\s*=>\s*(.+?)(?:\s+when\s+(.+))?", rest)
        if not m:
            self.err(KGSyntaxError, "expected: derive <Concept> => <Concept> via <transform> {, ...}",
                     line, raw)
        head = m.group(1)
        self.refs.append(("concept", head, line, raw.find(head) + 1))
        products = []
        for part in _split_commas(m.group(2)):
            pm = re.fullmatch(rf"\s*({_ID})\s+via\s+({_ID})(?:\(\s*([^()\s]+)\s*\))?\s*", part)
            if not pm:
                self.err(KGSyntaxError, f"malformed product {part.strip()!r}", line, raw, part.strip())
            concept, tid, param = pm.groups()
            self.refs.append(("concept", concept, line, raw.find(concept) + 1))
            self.refs.append(("extractor", tid, line, raw.find(tid) + 1))
            if (param is not None) != (tid == "triple_lookup"):
                self.err(KGSyntaxError, f"{tid}: parameter " + ("required" if param is None else "not allowed"),
                         line, raw, tid)
            products.append(Product(concept, tid, param))
        guard = ()
        if m.group(3):
            guard = self._preds(m.group(3), line, raw, _GUARD_PREDS)
        self.derivations.append(DerivationRule(f"D{len(self.derivations) + 1}", head, tuple(products), guard))

    def _noninterp(self, rest, line, raw):
        m = re.fullmatch(rf"((?:class:)?{_ID})\s+when\s+(.+)", rest)
        if not m:
            self.err(KGSyntaxError, "expected: noninterp <transform|class:name> when <pred> {and <pred>}",
                     line, raw)
        pattern = m.group(1)
        self.refs.append(("pattern", pattern, line, raw.find(pattern) + 1))
        preds = self._preds(m.group(2), line, raw, _RULE_PREDS)
        self.interp.append(InterpRule(f"N{len(self.interp) + 1}", pattern, preds))

    def _preds(self, text, line, raw, allowed) -> tuple[Predicate, ...]:
        out = []
        for part in re.split(r"\s+and\s+", text.strip()):
            pm = _PRED_RE.match(part.strip())
            name = pm and (pm.group(1) or pm.group(2))
            if not pm or name not in allowed:
                self.err(KGSyntaxError, f"unknown predicate {part.strip()!r}", line, raw, part.strip())
            arg = pm.group(3)
            if name == "concept_is":
                self.refs.append(("concept", arg, line, raw.find(arg) + 1))
            elif name == "unit_is":
                self.refs.append(("unit", arg, line, raw.find(arg) + 1))
            elif name == "dtype_is":
                if arg not in DTYPES:
                    self.err(UnknownReferenceError, f"unknown dtype {arg!r}", line, raw, arg)
            out.append(Predicate(name, arg))
        return tuple(out)

    def _triple(self, rest, line, raw):
        m = re.fullmatch(r"\((.*)\)", rest)
        parts = _split_commas(m.group(1)) if m else []
        if len(parts) != 3 or any(not p.strip() for p in parts):
            self.err(KGSyntaxError, "expected: triple (<subject>, <predicate>, <object>)", line, raw)
        s, p, o = parts
        self.triples.append(Triple(_text(s), _text(p), _literal(o)))

    def _interp_weight(self, rest, line, raw):
        m = re.fullmatch(rf"({_ID})\s+(\S+)", rest)
        if not m:
            self.err(KGSyntaxError, "expected: interp_weight <transform> <float>", line, raw)
        try:
            w = float(m.group(2))
        except ValueError:
            self.err(KGSyntaxError, f"not a number: {m.group(2)!r}", line, raw, m.group(2))
        if not 0.0 <= w <= 1.0:
            self.err(ScoreRangeError, f"score {w} outside [0,1]", line, raw, m.group(2))
        self.refs.append(("transform", m.group(1), line, raw.find(m.group(1)) + 1))
        self.weights[m.group(1)] = w

    def _resolve(self):
        for kind, name, line, col in self.refs:
            if kind == "concept" and name not in self.concepts and name != UNKNOWN:
                raise UnknownReferenceError(f"unknown concept {name!r}", self.path, line, col)
            if kind == "unit" and name not in self.units:
                raise UnknownReferenceError(f"unknown unit {name!r}", self.path, line, col)
            if kind == "transform" and name not in self.catalog:
                raise UnknownReferenceError(f"unknown transform {name!r}", self.path, line, col)
            if kind == "extractor":
                if name not in self.catalog:
                    raise UnknownReferenceError(f"unknown transform {name!r}", self.path, line, col)
                if self.catalog[name].n_operands != 1:
                    raise UnknownReferenceError(f"extractor {name!r} must take one operand",
                                                self.path, line, col)
            if kind == "pattern":
                if name.startswith("class:"):
                    if name[6:] not in self.catalog.classes:
                        raise UnknownReferenceError(f"unknown transform class {name!r}", self.path, line, col)
                elif name not in self.catalog:
                    raise UnknownReferenceError(f"unknown transform {name!r}", self.path, line, col)


def parse_kg_text(text: str, path: str = "<string>", catalog: TransformCatalog = CATALOG) -> KnowledgeBase:
    return _Parser(text, path, catalog).parse()


def parse_kg(path: str | Path, catalog: TransformCatalog = CATALOG) -> KnowledgeBase:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise KGError(f"cannot read knowledge base: {exc}", str(path)) from exc
    return parse_kg_text(text, str(path), catalog)


def _print_literal(v: Literal) -> str:
    if isinstance(v, bool):
        return f'"{v}"'
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(_literal(v), str) and re.fullmatch(r"[^\s\",()#;]+", v) and not v.endswith("."):
        return v
    return f'"{v}"'


def print_kg(kb: KnowledgeBase) -> str:
    """Serialize ``kb`` back into the rule language."""
    lines = []
    for cid, label in kb.concepts.items():
        if cid == UNKNOWN:
            continue
        lines.append(f"concept {cid}" if label == cid else f'concept {cid} "{label}"')
    for uid, dim in kb.units.items():
        lines.append(f"unit {uid} dim {dim}")
    for m in kb.column_mappings:
        lines.append(f"map {m.pattern} -> concept:{m.concept}" + (f" unit:{m.unit}" if m.unit else ""))
    for r in kb.derivation_rules:
        s = f"derive {r.head} => " + ", ".join(str(p) for p in r.products)
        if r.guard:
            s += " when " + " and ".join(str(g) for g in r.guard)
        lines.append(s)
    for r in kb.interp_rules:
        lines.append(f"noninterp {r.pattern} when " + " and ".join(str(c) for c in r.constraints))
    for t in kb.triples:
        lines.append(f"triple ({_print_literal(t.subject)}, {_print_literal(t.predicate)}, "
                     f"{_print_literal(t.object)})")
    for tid, w in kb.transform_interp.items():
        lines.append(f"interp_weight {tid} {w!r}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# semantic mapping


def _match(kb: KnowledgeBase, name: str) -> ColumnMapping | None:
    low = name.casefold()
    exact = [m for m in kb.column_mappings if m.pattern.casefold() == low]
    hits = exact or [m for m in kb.column_mappings
                     if fnmatch.fnmatchcase(low, m.pattern.casefold())]
    if not hits:
        return None
    concepts = {m.concept for m in hits}
    if len(concepts) > 1:
        raise AmbiguousMappingError(name, [(m.pattern, m.concept) for m in hits])
    return hits[0]


def map_columns(kb: KnowledgeBase, d: Dataset) -> Dataset:
    """Annotate each non-target column with the concept/unit of its mapping.

    Exact (case-insensitive) patterns win over globs. Columns without a
    mapping keep an existing annotation, or get the concept ``Unknown``.
    """
    cols = []
    for c in d.columns:
        if c.name == d.target:
            cols.append(c)
            continue
        m = _match(kb, c.name)
        if m is not None:
            cols.append(c.annotated(m.concept, m.unit if m.unit is not None else c.unit))
        elif c.concept is None:
            cols.append(c.annotated(UNKNOWN, c.unit))
        else:
            cols.append(c)
    return d.with_columns(cols)


def lookup_related(kb: KnowledgeBase, entity: str, predicate: str) -> list:
    return kb.lookup_related(entity, predicate)


DEMO_KG_PATH = Path(__file__).with_name("data") / "demo.kg"


def load_demo_kg() -> KnowledgeBase:
    return parse_kg(DEMO_KG_PATH)
