import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgfe.kg_store import KnowledgeBase, map_columns, parse_kg_text
from kgfe.reasoner import exploit
from kgfe.search_env import (ConfigError, FeatureEnv, OracleBudgetError, SearchConfig, exhaustive_oracle,
                             projected_oracle_count, random_baseline, search_space_size,
                             search_space_size_from_counts, train, transform_counts)
from kgfe.synthetic import toy_task
from kgfe.tabular import Column, Dataset, parse_datetime
from kgfe.transforms import CATALOG, TransformCatalog, applicable_operands
from oracles import enumerate_candidates

KB = parse_kg_text("concept Signal\nmap x -> concept:Signal\n")


def _ds(n=40, seed=0, extra=()):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 3, n)
    cols = [Column("x", "numeric", x), *extra, Column("y", "numeric", x ** 2 + rng.normal(0, 0.01, n))]
    return map_columns(KB, Dataset(tuple(cols), "y", "regression"))


def _stub(base=0.40, after=0.55):
    return lambda d: base if len(d.feature_names) == 1 else after


def _action(tid):
    return [t.id for t in CATALOG.actions()].index(tid)


def _check_log(result, lam):
    for e in result.log:
        assert e["reward"] == pytest.approx(lam * e["delta_perf"] + (1 - lam) * e["interp_new"], abs=1e-12)


# -- config ---------------------------------------------------------------------


@pytest.mark.parametrize("bad", [{"lam": 1.5}, {"lam": -0.1}, {"m": 0}, {"top_k": 0}, {"k": 1},
                                 {"episodes": -1}, {"gamma": 1.0}, {"bootstrap_rows": 3}])
def test_config_ranges(bad):
    with pytest.raises(ConfigError):
        SearchConfig(**bad)


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        SearchConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = SearchConfig(lam=0.3, m=2)
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg


# -- step -----------------------------------------------------------------------


def test_reward_example():
    # performance 0.40 -> 0.55, new feature interpretability 0.9, weight 0.7
    expected = 0.7 * (0.55 - 0.40) + 0.3 * 0.9
    assert expected == pytest.approx(0.375, abs=1e-12)
    env = FeatureEnv(_ds(), KB, SearchConfig(lam=0.7, top_k=1), evaluator=_stub())
    s = env.reset()
    s2, r, _, info = env.step(s, _action("log"))
    assert info.new_features == ["log(x)"]
    assert info.interp_new == pytest.approx(0.9, abs=1e-15)
    assert r == pytest.approx(expected, abs=1e-12)


def test_action_without_operands():
    env = FeatureEnv(_ds(), KB, SearchConfig(), evaluator=_stub())
    s = env.reset()
    a = _action("haversine_km")
    assert not env.mask(s)[a]
    s2, r, _, info = env.step(s, a)
    assert info.new_features == [] and r == 0.0
    assert s2.dataset.feature_names == s.dataset.feature_names


def test_terminal_at_m():
    env = FeatureEnv(_ds(), KB, SearchConfig(m=2), evaluator=_stub())
    s = env.reset()
    s, _, done, _ = env.step(s, _action("log"))
    assert not done
    s, _, done, _ = env.step(s, _action("sqrt"))
    assert done and s.step == 2


def test_terminal_when_nothing_applies():
    d = Dataset((Column("flag", "boolean", [0.0, 1.0, 1.0, 0.0]), Column("y", "numeric", [1.0, 2, 3, 4])),
                "y", "regression")
    env = FeatureEnv(d, KnowledgeBase(), SearchConfig(k=2), evaluator=_stub())
    assert not env.mask(env.reset()).any()


def test_duplicates_and_constants_skipped():
    ones = Column("ones", "numeric", np.ones(40))
    env = FeatureEnv(_ds(extra=(ones,)), KB, SearchConfig(), evaluator=_stub())
    s = env.reset()
    names = [c.name for c, _, _ in env.candidates(s, _action("mul"))]
    assert names == []  # x * 1 repeats x
    assert [c.name for c, _, _ in env.candidates(s, _action("add"))] == ["add(x,ones)"]


def test_top_k_keeps_most_correlated():
    rng = np.random.default_rng(1)
    noise = Column("noise", "numeric", rng.uniform(1, 2, 40))
    env = FeatureEnv(_ds(extra=(noise,)), KB, SearchConfig(top_k=1), evaluator=_stub())
    (col, ops, flagged), = env.candidates(env.reset(), _action("square"))
    assert col.name == "square(x)" and ops == ("x",) and not flagged


def test_flagged_candidates_scored_zero_or_dropped():
    kb = parse_kg_text("concept M\nconcept L\nunit kg dim mass\nunit m dim length\n"
                       "map x -> concept:M unit:kg\nmap h -> concept:L unit:m\n"
                       "noninterp add when units_differ\n")
    h = Column("h", "numeric", np.linspace(1, 2, 40))
    d = map_columns(kb, _ds(extra=(h,)))
    keep = FeatureEnv(d, kb, SearchConfig(top_k=4), evaluator=_stub())
    s2, _, _, info = keep.step(keep.reset(), _action("add"))
    assert info.new_features and all(keep.graph.interpretability(n) == 0.0 for n in info.new_features)
    drop = FeatureEnv(d, kb, SearchConfig(top_k=4, drop_noninterp=True), evaluator=_stub())
    assert not drop.mask(drop.reset())[_action("add")]


def test_bootstrap_rows_fixed_sample():
    env = FeatureEnv(_ds(n=200), KB, SearchConfig(bootstrap_rows=50, k=5))
    assert len(env.rows) == 50 and len(np.unique(env.rows)) == 50
    again = FeatureEnv(_ds(n=200), KB, SearchConfig(bootstrap_rows=50, k=5))
    assert np.array_equal(env.rows, again.rows)
    assert len(env.folds.assignments) == 50


# -- drivers --------------------------------------------------------------------


def test_zero_episodes_is_baseline():
    d = _ds()
    res = train(d, KB, SearchConfig(episodes=0), evaluator=_stub())
    assert res.best_pipeline == [] and res.generated == []
    assert res.best_dataset is d
    assert res.objective == pytest.approx(0.7 * 0.40, abs=1e-15)


def test_train_deterministic():
    task = toy_task(n=120)
    cfg = SearchConfig(episodes=4, m=2, seed=3)
    a, b = train(task.dataset, task.kb, cfg), train(task.dataset, task.kb, cfg)
    assert a.to_dict() == b.to_dict()
    assert a.log == b.log


def test_random_baseline_deterministic_and_raw_only():
    stamps = [parse_datetime("2023-04-0%dT08:00:00" % (1 + i % 7)) for i in range(40)]
    kb = parse_kg_text("concept Date\nconcept Day\nmap *_date -> concept:Date\n"
                       "derive Date => Day via extract_day\n")
    d, _, g = exploit(map_columns(kb, _ds(extra=(Column("ride_date", "datetime", stamps),))), kb)
    cfg = SearchConfig(episodes=5, m=3, seed=1)
    a = random_baseline(d, kb, cfg, graph=g, evaluator=lambda d: 0.0)
    b = random_baseline(d, kb, cfg, graph=g, evaluator=lambda d: 0.0)
    assert a.to_dict() == b.to_dict()
    raw = {"x", "ride_date"}
    assert a.log
    for step in a.best_pipeline:
        for ops in step.operands:
            assert set(ops) <= raw


def test_no_valid_action_returns_base():
    d = Dataset((Column("flag", "boolean", [0.0, 1.0, 1.0, 0.0]), Column("y", "numeric", [1.0, 2, 3, 4])),
                "y", "regression")
    cfg = SearchConfig(k=2, episodes=3)
    for run in (train, random_baseline):
        res = run(d, KnowledgeBase(), cfg, evaluator=lambda d: 0.5)
        assert res.best_dataset is d and res.best_pipeline == []


def test_lambda_zero_ignores_performance():
    task = toy_task(n=120)
    res = train(task.dataset, task.kb, SearchConfig(lam=0.0, episodes=3, m=3), evaluator=lambda d: 0.123)
    assert res.log
    for e in res.log:
        assert e["delta_perf"] == 0.0
        assert e["reward"] == pytest.approx(e["interp_new"], abs=1e-15)


def test_lambda_one_is_pure_performance():
    task = toy_task(n=120)
    res = train(task.dataset, task.kb, SearchConfig(lam=1.0, episodes=3, m=2))
    for e in res.log:
        assert e["reward"] == pytest.approx(e["delta_perf"], abs=1e-15)


def test_search_invariants():
    task = toy_task(n=150)
    cfg = SearchConfig(episodes=6, m=3, top_k=2, seed=2)
    res = train(task.dataset, task.kb, cfg)
    p0 = len(task.dataset.feature_names)
    _check_log(res, cfg.lam)
    steps_per_episode = {}
    for e in res.log:
        steps_per_episode[e["episode"]] = steps_per_episode.get(e["episode"], 0) + 1
    assert max(steps_per_episode.values()) <= cfg.m
    assert len(res.best_dataset.feature_names) <= p0 + cfg.m * cfg.top_k
    assert res.objective == pytest.approx(cfg.lam * res.perf_trace[-1] + (1 - cfg.lam) * res.interp_trace[-1],
                                          abs=1e-15)
    base = train(task.dataset, task.kb, SearchConfig(episodes=0, m=3, top_k=2, seed=2))
    assert res.objective >= base.objective


# -- search-space size ---------------------------------------------------------


def test_space_size_hand_case():
    assert search_space_size_from_counts(2, {1: 2, 2: 1}) == 4 + 2 == 6


def test_space_size_binary_only_single_feature():
    assert search_space_size_from_counts(1, {2: 6}) == 0


def test_space_size_builtin():
    # 10 one-operand, 12 two-operand and 1 four-operand action
    assert transform_counts(CATALOG.actions()) == {1: 10, 2: 12, 4: 1}
    assert search_space_size(20) == 20 * 10 + 20 * 19 * 12 + 20 * 19 * 18 * 17 == 121040


def test_space_size_exact_for_huge_p():
    p = 10 ** 6
    assert search_space_size(p) == 10 * p + 12 * p * (p - 1) + p * (p - 1) * (p - 2) * (p - 3)


def _subcatalog(rng):
    picked = rng.sample(CATALOG.actions(), rng.randint(1, 8))
    return TransformCatalog(tuple(picked), {})


@pytest.mark.parametrize("seed", range(3))
def test_space_size_matches_enumeration(seed):
    cat = _subcatalog(random.Random(seed))
    for p in range(1, 5):
        d = Dataset(tuple(Column(f"f{i}", "numeric", [1.0]) for i in range(p)) + (Column("y", "numeric", [0.0]),),
                    "y", "regression")
        listed = sum(len(applicable_operands(t, d, check_dtypes=False)) for t in cat.actions())
        assert search_space_size(p, cat) == listed == enumerate_candidates(p, [t.n_operands for t in cat.actions()])


@given(st.integers(1, 7), st.dictionaries(st.integers(1, 4), st.integers(0, 5)))
def test_space_size_formula(p, counts):
    assert search_space_size_from_counts(p, counts) == enumerate_candidates(
        p, [n for n, c in counts.items() for _ in range(c)])


# -- oracle -----------------------------------------------------------------------


def test_oracle_budget_refusal():
    cols = tuple(Column(f"f{i}", "numeric", np.arange(10.0) + i) for i in range(20))
    d = Dataset(cols + (Column("y", "numeric", np.arange(10.0)),), "y", "regression")
    with pytest.raises(OracleBudgetError) as info:
        exhaustive_oracle(d, KnowledgeBase(), depth=1)
    assert info.value.count == 121040
    assert "121040" in str(info.value)


def test_oracle_depth_zero():
    d = _ds()
    res = exhaustive_oracle(d, KB, depth=0, evaluator=_stub())
    assert res.best_dataset is d and res.best_pipeline == []


def test_oracle_projected_count():
    assert projected_oracle_count(3, 2) == search_space_size(3) + search_space_size(3) ** 2


def test_oracle_finds_true_best_step():
    task = toy_task(n=150)
    cfg = SearchConfig(m=1, top_k=2)
    oracle = exhaustive_oracle(task.dataset, task.kb, depth=1, cfg=cfg)
    env = FeatureEnv(task.dataset, task.kb, cfg)
    s0 = env.reset()
    best = env.objective(s0)
    for a in np.flatnonzero(env.mask(s0)):
        best = max(best, env.objective(env.step(s0, int(a))[0]))
    assert oracle.objective == pytest.approx(best, abs=1e-12)
    assert math.isfinite(oracle.objective)
