"""Decomposition graph: features as nodes, transform applications as edges.

A feature's interpretability is its best derivation: for each incoming
application take the transform weight times the weakest operand score, then
keep the maximum over applications. Known-concept and raw nodes carry a fixed
base score. Applications flagged by a non-interpretability rule score 0, so a
cleaner derivation of the same feature can still win.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

from .transforms import default_interp_weights

KINDS = ("known_concept", "raw", "generated")


class GraphCycleError(ValueError):
    pass


@dataclass
class FeatureNode:
    id: str
    name: str
    kind: str
    base_score: float | None = None
    cached_score: float | None = None


class Application(NamedTuple):
    id: int
    transform: str
    operands: tuple[str, ...]
    product: str
    flagged: bool


class DerivationEdge(NamedTuple):
    source: str
    target: str
    transform: str
    application: int


class DecompositionGraph:
    def __init__(self, interp_weights: Mapping[str, float] | None = None):
        self.interp_weights = dict(default_interp_weights() if interp_weights is None else interp_weights)
        self.nodes: dict[str, FeatureNode] = {}
        self.applications: list[Application] = []
        self._incoming: dict[str, list[Application]] = {}
        self._children: dict[str, set[str]] = {}
        self.memoize = True

    def __contains__(self, name: str) -> bool:
        return name in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> list[DerivationEdge]:
        return [DerivationEdge(op, a.product, a.transform, a.id)
                for a in self.applications for op in a.operands]

    def incoming(self, name: str) -> list[Application]:
        return list(self._incoming.get(name, ()))

    def add_known(self, name: str, score: float = 1.0, kind: str = "known_concept") -> str:
        """Insert (or re-score) a node with a fixed base score."""
        if kind not in ("known_concept", "raw"):
            raise ValueError(f"base-scored nodes are known_concept or raw, not {kind!r}")
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0,1]")
        node = self.nodes.get(name)
        if node is None:
            self.nodes[name] = FeatureNode(name, name, kind, score)
            self._children.setdefault(name, set())
        else:
            node.kind, node.base_score = kind, score
            self._invalidate(name)
        return name

    def ancestors(self, name: str) -> set[str]:
        seen: set[str] = set()
        stack = [name]
        while stack:
            for app in self._incoming.get(stack.pop(), ()):
                for op in app.operands:
                    if op not in seen:
                        seen.add(op)
                        stack.append(op)
        return seen

    def descendants(self, name: str) -> set[str]:
        seen: set[str] = set()
        stack = [name]
        while stack:
            for ch in self._children.get(stack.pop(), ()):
                if ch not in seen:
                    seen.add(ch)
                    stack.append(ch)
        return seen

    def add_application(self, transform: str, operands: Sequence[str], product: str,
                        flagged: bool = False) -> str:
        """Record ``product = transform(*operands)`` and return the product's node id."""
        operands = tuple(operands)
        for op in operands:
            if op not in self.nodes:
                raise KeyError(f"operand {op!r} not in graph")
        if product in operands:
            raise GraphCycleError(f"{product!r} cannot be derived from itself")
        if product in self.nodes:
            for app in self._incoming.get(product, ()):
                if app.transform == transform and app.operands == operands:
                    return product
            for op in operands:
                if product in self.ancestors(op):
                    raise GraphCycleError(f"deriving {product!r} from {op!r} would create a cycle")
        else:
            self.nodes[product] = FeatureNode(product, product, "generated")
            self._children.setdefault(product, set())
        app = Application(len(self.applications), transform, operands, product, bool(flagged))
        self.applications.append(app)
        self._incoming.setdefault(product, []).append(app)
        for op in operands:
            self._children[op].add(product)
        self._invalidate(product)
        return product

    def _invalidate(self, name: str) -> None:
        for n in (name, *self.descendants(name)):
            self.nodes[n].cached_score = None

    def application_score(self, app: Application) -> float:
        if app.flagged:
            return 0.0
        return self.interp_weights[app.transform] * min(self.interpretability(op) for op in app.operands)

    def interpretability(self, name: str) -> float:
        node = self.nodes[name]
        if node.kind != "generated":
            return node.base_score
        if self.memoize and node.cached_score is not None:
            return node.cached_score
        score = max((self.application_score(a) for a in self._incoming.get(name, ())), default=0.0)
        if self.memoize:
            node.cached_score = score
        return score

    def topological_order(self) -> list[str]:
        """Nodes with every operand before its products; ties broken by name."""
        indeg = {n: 0 for n in self.nodes}
        parents: dict[str, set[str]] = {n: set() for n in self.nodes}
        for a in self.applications:
            parents[a.product].update(a.operands)
        for n, ps in parents.items():
            indeg[n] = len(ps)
        heap = [n for n, k in indeg.items() if k == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            n = heapq.heappop(heap)
            order.append(n)
            for ch in self._children.get(n, ()):
                indeg[ch] -= 1
                if indeg[ch] == 0:
                    heapq.heappush(heap, ch)
        return order

    def subgraph(self, names: Iterable[str]) -> "DecompositionGraph":
        """The named nodes plus all their ancestors, with every application among them."""
        keep: set[str] = set()
        for n in names:
            keep.add(n)
            keep |= self.ancestors(n)
        g = DecompositionGraph(self.interp_weights)
        for n in self.topological_order():
            if n not in keep:
                continue
            node = self.nodes[n]
            if node.kind != "generated":
                g.add_known(n, node.base_score, node.kind)
            for a in self._incoming.get(n, ()):
                if all(op in keep for op in a.operands):
                    g.add_application(a.transform, a.operands, n, a.flagged)
        return g

    def to_dict(self) -> dict:
        order = self.topological_order()
        return {
            "nodes": [
                {"id": n, "kind": self.nodes[n].kind, "base_score": self.nodes[n].base_score,
                 "score": self.interpretability(n)}
                for n in order
            ],
            "applications": [
                {"id": a.id, "transform": a.transform, "operands": list(a.operands),
                 "product": a.product, "flagged": a.flagged}
                for a in self.applications
            ],
            "interp_weights": dict(sorted(self.interp_weights.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DecompositionGraph":
        g = cls(data["interp_weights"])
        for n in data["nodes"]:
            if n["kind"] != "generated":
                g.add_known(n["id"], n["base_score"], n["kind"])
        pending = list(data["applications"])
        placed = set(g.nodes)
        # applications may reference nodes defined later in the list
        while pending:
            progress = False
            rest = []
            for a in pending:
                if all(op in placed for op in a["operands"]):
                    g.add_application(a["transform"], a["operands"], a["product"], a["flagged"])
                    placed.add(a["product"])
                    progress = True
                else:
                    rest.append(a)
            if not progress:
                raise ValueError("graph data references unknown operands")
            pending = rest
        return g


def interpretability(g: DecompositionGraph, name: str) -> float:
    return g.interpretability(name)


def dataset_interpretability(g: DecompositionGraph, features: Sequence[str]) -> float:
    """Mean interpretability of ``features``; 0.0 for an empty list."""
    if not features:
        return 0.0
    return sum(g.interpretability(f) for f in features) / len(features)


def interpretability_sum(g: DecompositionGraph, features: Sequence[str]) -> float:
    return sum(g.interpretability(f) for f in features)


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(g: DecompositionGraph) -> str:
    lines = ["digraph DecomG {", "  rankdir=LR;"]
    for n in g.topological_order():
        node = g.nodes[n]
        score = g.interpretability(n)
        shape = "box" if node.kind == "generated" else "ellipse"
        label = _dot_id(n)[:-1] + "\\n" + f"{score:.4f}" + '"'
        lines.append(f"  {_dot_id(n)} [kind={_dot_id(node.kind)}, score={_dot_id(repr(score))}, "
                     f"shape={shape}, label={label}];")
    for a in g.applications:
        style = ", style=dashed, color=red" if a.flagged else ""
        for op in a.operands:
            lines.append(f"  {_dot_id(op)} -> {_dot_id(a.product)} [label={_dot_id(a.transform)}, "
                         f"application={a.id}{style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(g: DecompositionGraph) -> str:
    return json.dumps(g.to_dict(), indent=2, sort_keys=False) + "\n"
