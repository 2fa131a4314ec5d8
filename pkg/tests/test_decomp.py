import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgfe.decomp import (DecompositionGraph, GraphCycleError, dataset_interpretability, export_dot,
                         export_json, interpretability, interpretability_sum)
from oracles import brute_force_scores, random_dag


def _build(base, apps, weights, memoize=True):
    g = DecompositionGraph(weights)
    g.memoize = memoize
    for n, s in base.items():
        g.add_known(n, s)
    for t, ops, product, flagged in apps:
        g.add_application(t, ops, product, flagged)
    return g


def _bmi_graph():
    g = DecompositionGraph()
    g.add_known("weight")
    g.add_known("height")
    g.add_application("square", ["height"], "square(height)")
    g.add_application("div", ["weight", "square(height)"], "div(weight,square(height))")
    return g


def test_known_node_base_score():
    g = DecompositionGraph()
    g.add_known("x")
    g.add_known("raw", 0.8, "raw")
    assert interpretability(g, "x") == 1.0
    assert interpretability(g, "raw") == 0.8


def test_single_chain():
    g = DecompositionGraph({"log": 0.9})
    g.add_known("x")
    g.add_application("log", ["x"], "log(x)")
    assert interpretability(g, "log(x)") == 0.9


def test_max_over_applications():
    g = DecompositionGraph({"a": 0.9, "b": 0.95})
    g.add_known("k1", 1.0)
    g.add_known("k2", 0.76)
    g.add_application("a", ["k1"], "f")
    g.add_application("b", ["k2"], "f")
    assert interpretability(g, "f") == 0.9
    assert g.application_score(g.incoming("f")[1]) == pytest.approx(0.722, abs=1e-12)


def test_min_over_operands():
    g = DecompositionGraph({"mul": 0.5})
    g.add_known("a", 1.0)
    g.add_known("b", 0.6)
    g.add_application("mul", ["a", "b"], "ab")
    assert interpretability(g, "ab") == 0.3


def test_flagged_application_scores_zero():
    g = DecompositionGraph({"add": 0.95})
    g.add_known("a")
    g.add_known("b")
    g.add_application("add", ["a", "b"], "s", flagged=True)
    assert interpretability(g, "s") == 0.0
    g.add_application("add", ["b", "a"], "s")
    assert interpretability(g, "s") == 0.95


def test_bmi_construction():
    g = _bmi_graph()
    assert len(g) == 4
    assert len(g.edges) == 3
    assert sum(1 for n in g.nodes.values() if n.kind == "generated") == 2
    assert interpretability(g, "div(weight,square(height))") == 0.95 * 0.90


def test_duplicate_application_is_noop():
    g = _bmi_graph()
    again = g.add_application("square", ["height"], "square(height)")
    assert again == "square(height)"
    assert len(g.applications) == 2


def test_self_cycle_rejected():
    g = DecompositionGraph()
    g.add_known("x")
    with pytest.raises(GraphCycleError):
        g.add_application("log", ["x"], "x")


def test_longer_cycle_rejected():
    g = DecompositionGraph()
    g.add_known("x")
    g.add_application("log", ["x"], "a")
    g.add_application("log", ["a"], "b")
    with pytest.raises(GraphCycleError):
        g.add_application("log", ["b"], "a")


def test_unknown_operand_rejected():
    with pytest.raises(KeyError):
        DecompositionGraph().add_application("log", ["ghost"], "y")


def test_cache_invalidated_downstream():
    g = DecompositionGraph({"log": 0.9, "sqrt": 0.5})
    g.add_known("x", 0.5)
    g.add_application("sqrt", ["x"], "a")
    g.add_application("log", ["a"], "b")
    assert interpretability(g, "b") == 0.9 * 0.5 * 0.5
    g.add_known("x", 1.0)
    assert interpretability(g, "b") == 0.9 * 0.5


def test_dataset_interpretability():
    g = DecompositionGraph({"a": 0.9, "b": 0.722})
    g.add_known("k")
    g.add_application("a", ["k"], "f1")
    g.add_application("b", ["k"], "f2")
    assert dataset_interpretability(g, ["k"]) == 1.0
    assert dataset_interpretability(g, ["k", "f1", "f2"]) == pytest.approx(0.874, abs=1e-12)
    assert interpretability_sum(g, ["k", "f1", "f2"]) == pytest.approx(2.622, abs=1e-12)
    assert dataset_interpretability(g, []) == 0.0


def test_single_noninterpretable_feature():
    g = DecompositionGraph({"add": 0.95})
    g.add_known("a")
    g.add_known("b")
    g.add_application("add", ["a", "b"], "s", flagged=True)
    assert dataset_interpretability(g, ["s"]) == 0.0


def test_dot_chain():
    g = DecompositionGraph({"log": 0.9})
    g.add_known("x")
    g.add_application("log", ["x"], "log(x)")
    dot = export_dot(g)
    assert dot.count("->") == 1
    assert dot.startswith("digraph")


def test_dot_bmi_and_empty():
    dot = export_dot(_bmi_graph())
    assert dot.count("->") == 3
    assert sum(1 for line in dot.splitlines() if "[kind=" in line) == 4
    empty = export_dot(DecompositionGraph())
    assert empty.startswith("digraph") and "->" not in empty and empty.rstrip().endswith("}")


def test_topological_ties_by_name():
    g = DecompositionGraph()
    for n in ["c", "a", "b"]:
        g.add_known(n)
    g.add_application("mul", ["c", "a"], "z")
    assert g.topological_order() == ["a", "b", "c", "z"]


def test_json_round_trip():
    g = _bmi_graph()
    g.add_known("age", 0.8, "raw")
    g.add_application("add", ["weight", "age"], "add(weight,age)", flagged=True)
    back = DecompositionGraph.from_dict(json.loads(export_json(g)))
    assert export_json(back) == export_json(g)
    assert export_dot(back) == export_dot(g)


def test_subgraph_keeps_ancestors():
    g = _bmi_graph()
    g.add_known("age")
    sub = g.subgraph(["div(weight,square(height))"])
    assert set(sub.nodes) == {"weight", "height", "square(height)", "div(weight,square(height))"}
    assert sub.interpretability("div(weight,square(height))") == g.interpretability("div(weight,square(height))")


def test_random_dags_match_brute_force():
    rng = random.Random(1234)
    for _ in range(50):
        base, apps, weights = random_dag(rng)
        g = _build(base, apps, weights)
        for n, want in brute_force_scores(base, apps, weights).items():
            assert g.interpretability(n) == want


# -- properties ----------------------------------------------------------------


@st.composite
def dags(draw):
    return random_dag(random.Random(draw(st.integers(0, 2 ** 32))))


@given(dags())
def test_memoization_transparent(dag):
    on, off = _build(*dag), _build(*dag, memoize=False)
    for n in on.nodes:
        assert on.interpretability(n) == off.interpretability(n)


@given(dags())
def test_scores_in_unit_interval_and_damped(dag):
    g = _build(*dag)
    for n in g.nodes:
        s = g.interpretability(n)
        assert 0.0 <= s <= 1.0
        if g.incoming(n):
            best_operand = max(min(g.interpretability(o) for o in a.operands) for a in g.incoming(n))
            assert s <= best_operand


@given(dags(), st.integers(0, 10 ** 6), st.floats(0, 1))
def test_new_application_never_lowers_score(dag, pick, w):
    g = _build(*dag)
    generated = [n for n in g.nodes if g.incoming(n)]
    if not generated:
        return
    target = generated[pick % len(generated)]
    before = {n: g.interpretability(n) for n in g.nodes}
    candidates = sorted(set(g.nodes) - {target} - g.descendants(target))
    g.interp_weights["extra"] = w
    g.add_application("extra", [candidates[pick % len(candidates)]], target)
    for n in g.nodes:
        assert g.interpretability(n) >= before[n]
