"""Exploitation: forward-chain derivation rules over the column annotations.

Facts are (concept, column) pairs. Each round fires every derivation rule
whose head concept matches a column produced in the previous round, computes
the products with their extractor transforms, and stops at a fixpoint or after
``max_depth`` rounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import units as U
from .decomp import DecompositionGraph
from .kg_store import KnowledgeBase, Predicate
from .tabular import Column, Dataset, append_feature
from .transforms import CATALOG, UNKNOWN, TransformCatalog, apply

log = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH = 3
DEFAULT_UNKNOWN_SCORE = 0.8


@dataclass(frozen=True)
class TraceStep:
    rule: str
    source: str
    produced: tuple[str, ...]


@dataclass
class InferenceTrace:
    steps: list[TraceStep] = field(default_factory=list)
    depth_reached: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "steps": [{"rule": s.rule, "source": s.source, "produced": list(s.produced)} for s in self.steps],
            "depth_reached": self.depth_reached,
            "warnings": list(self.warnings),
        }


def _pattern_matches(pattern: str, tid: str, catalog: TransformCatalog) -> bool:
    if pattern.startswith("class:"):
        return tid in catalog.members(pattern[6:])
    return pattern == tid


def _holds(pred: Predicate, operands: list[Column]) -> bool:
    if pred.name == "units_differ":
        return U.units_differ([c.unit for c in operands])
    if pred.name == "unit_is":
        return any(U.normalize(c.unit) == U.normalize(pred.arg) for c in operands if c.unit is not None)
    if pred.name == "concept_is":
        return any(c.concept == pred.arg for c in operands)
    if pred.name == "dtype_is":
        return any(c.dtype == pred.arg for c in operands)
    raise ValueError(f"unknown predicate {pred.name!r}")


def check_interpretability_rules(kb: KnowledgeBase, transform: str, operands: list[Column],
                                 catalog: TransformCatalog = CATALOG) -> str:
    """``"non_interpretable"`` when any rule of ``kb`` matches, else ``"interpretable"``."""
    for rule in kb.interp_rules:
        if _pattern_matches(rule.pattern, transform, catalog) and all(
                _holds(p, operands) for p in rule.constraints):
            return "non_interpretable"
    return "interpretable"


def seed_graph(d: Dataset, kb: KnowledgeBase, unknown_score: float = DEFAULT_UNKNOWN_SCORE,
               catalog: TransformCatalog = CATALOG) -> DecompositionGraph:
    """A graph holding every feature of ``d`` as a base-scored node."""
    g = DecompositionGraph(kb.interp_weights(catalog))
    for c in d.features:
        if c.concept is not None and c.concept != UNKNOWN:
            g.add_known(c.name, 1.0, "known_concept")
        else:
            g.add_known(c.name, unknown_score, "raw")
    return g


def _derive(d: Dataset, col: Column, rule, kb, catalog, trace: InferenceTrace) -> list[tuple[Column, str]]:
    """Products of one rule on one column, skipping (with a warning) anything that cannot apply."""
    if rule.guard and not all(_holds(p, [col]) for p in rule.guard):
        trace.warnings.append(f"{rule.id}: guard failed on column {col.name!r}")
        return []
    out = []
    for prod in rule.products:
        t = catalog[prod.transform]
        if col.dtype not in t.input_dtypes[0]:
            trace.warnings.append(
                f"{rule.id}: {prod.transform} cannot read {col.dtype} column {col.name!r}")
            continue
        new = apply(t, [col], d, kb=kb, param=prod.param)[0]
        if new.absent.all():
            trace.warnings.append(f"{rule.id}: {new.name} has no values; skipped")
            continue
        out.append((new.annotated(prod.concept, new.unit), t.id))
    return out


def exploit(d: Dataset, kb: KnowledgeBase, max_depth: int = DEFAULT_MAX_DEPTH,
            unknown_score: float = DEFAULT_UNKNOWN_SCORE,
            catalog: TransformCatalog = CATALOG) -> tuple[Dataset, InferenceTrace, DecompositionGraph]:
    """Enrich ``d`` with every feature the derivation rules can infer.

    ``d`` should already be column-mapped. Raw mapped columns and every
    inferred column enter the graph as known concepts (score 1.0); unmapped
    raw columns enter as raw nodes scored ``unknown_score``.
    """
    graph = seed_graph(d, kb, unknown_score, catalog)
    trace = InferenceTrace()
    d = d.with_columns(d.columns, {**{n: n for n in d.feature_names}, **d.provenance})
    frontier = [c for c in d.features if c.concept not in (None, UNKNOWN)]
    for depth in range(1, max_depth + 1):
        added: list[Column] = []
        for col in frontier:
            for rule in kb.rules_for(col.concept):
                produced = []
                for new, tid in _derive(d, col, rule, kb, catalog, trace):
                    if new.name in d:
                        continue
                    d = append_feature(d, new, new.name)
                    graph.add_known(new.name, 1.0, "known_concept")
                    graph.add_application(tid, [col.name], new.name)
                    produced.append(new.name)
                    added.append(new)
                if produced:
                    trace.steps.append(TraceStep(rule.id, col.name, tuple(produced)))
        if not added:
            break
        trace.depth_reached = depth
        frontier = added
    for w in trace.warnings:
        log.warning(w)
    return d, trace, graph


def replay(trace: InferenceTrace, d: Dataset, kb: KnowledgeBase,
           catalog: TransformCatalog = CATALOG) -> Dataset:
    """Re-run the recorded steps of ``trace`` against the original dataset."""
    rules = {r.id: r for r in kb.derivation_rules}
    for step in trace.steps:
        rule, col = rules[step.rule], d[step.source]
        for prod in rule.products:
            t = catalog[prod.transform]
            new = apply(t, [col], d, kb=kb, param=prod.param)[0]
            if new.name in step.produced:
                d = append_feature(d, new.annotated(prod.concept, new.unit), new.name)
    return d
