"""The feature-search MDP, the DQN training loop and two reference searches.

A state is an immutable augmented dataset plus its pipeline so far. An action
picks a transform; the environment applies it to every valid operand tuple,
keeps the ``top_k`` most target-relevant new columns and pays

    lam * (perf_after - perf_before) + (1 - lam) * mean interpretability of the new columns.

The returned pipeline is the best state seen by the objective
``lam * perf + (1 - lam) * mean interpretability of all search-generated columns``.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .agent import DQNAgent, EpsilonSchedule, StateSpace, StepContext, Transition, select_action
from .decomp import DecompositionGraph, dataset_interpretability
from .evaluator import (Learner, cross_val, default_learner, mutual_information_columns, relevance,
                        target_vector)
from .kg_store import KnowledgeBase
from .reasoner import DEFAULT_UNKNOWN_SCORE, seed_graph
from .tabular import FLOAT_DTYPES, Column, Dataset, append_feature, make_folds
from .transforms import CATALOG, Transform, TransformCatalog, applicable_operands, apply, has_operands

ORACLE_BUDGET = 100_000


class ConfigError(ValueError):
    pass


class OracleBudgetError(RuntimeError):
    def __init__(self, count: int, budget: int = ORACLE_BUDGET):
        super().__init__(f"exhaustive search needs {count} candidates, budget is {budget}")
        self.count = count
        self.budget = budget


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 0.7
    m: int = 5
    episodes: int = 50
    top_k: int = 8
    drop_noninterp: bool = False
    bootstrap_rows: int | None = 5000
    seed: int = 0
    k: int = 5
    gamma: float = 0.9
    lr: float = 1e-3
    batch_size: int = 32
    buffer_capacity: int = 2000
    sync_period: int = 50
    hidden: int = 64
    eps_start: float = 1.0
    eps_min: float = 0.05
    eps_decay: float = 0.97

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0,1], got {self.lam}")
        for name in ("m", "top_k", "k", "batch_size", "buffer_capacity", "sync_period", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.episodes < 0:
            raise ConfigError(f"episodes must be >= 0, got {self.episodes}")
        if self.bootstrap_rows is not None and self.bootstrap_rows < 2 * self.k:
            raise ConfigError(f"bootstrap_rows must be >= 2k, got {self.bootstrap_rows}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0,1), got {self.gamma}")
        if not (0.0 <= self.eps_min <= self.eps_start <= 1.0 and 0.0 < self.eps_decay <= 1.0):
            raise ConfigError("epsilon schedule needs 0 <= eps_min <= eps_start <= 1 and 0 < decay <= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown search settings: {extra}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_start, self.eps_min, self.eps_decay)


@dataclass(frozen=True)
class PipelineStep:
    transform: str
    operands: tuple[tuple[str, ...], ...]
    features: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"transform": self.transform, "operands": [list(o) for o in self.operands],
                "features": list(self.features)}


@dataclass(frozen=True, eq=False)
class SearchState:
    dataset: Dataset
    step: int
    perf: float
    generated: tuple[str, ...] = ()
    pipeline: tuple[PipelineStep, ...] = ()
    perf_trace: tuple[float, ...] = ()
    interp_trace: tuple[float, ...] = ()
    gen_counts: tuple[int, ...] = (0,)
    last_reward: float = 0.0

    @property
    def key(self) -> tuple[str, ...]:
        return tuple(sorted(self.dataset.feature_names))


@dataclass
class StepInfo:
    transform: str
    new_features: list[str]
    delta_perf: float
    interp_new: float
    perf: float


@dataclass
class PipelineResult:
    best_pipeline: list[PipelineStep]
    best_dataset: Dataset
    perf_trace: list[float]
    interp_trace: list[float]
    objective: float
    lam: float
    generated: list[str]
    graph: DecompositionGraph
    log: list[dict] = field(default_factory=list)
    episodes: int = 0

    @property
    def perf(self) -> float:
        return self.perf_trace[-1]

    @property
    def mean_interp(self) -> float:
        return self.interp_trace[-1]

    def feature_scores(self) -> dict[str, float]:
        return {f: self.graph.interpretability(f) for f in self.generated}

    def to_dict(self) -> dict:
        return {
            "pipeline": [s.to_dict() for s in self.best_pipeline],
            "generated": list(self.generated),
            "feature_scores": self.feature_scores(),
            "perf_trace": list(self.perf_trace),
            "interp_trace": list(self.interp_trace),
            "objective": self.objective,
            "lambda": self.lam,
            "episodes": self.episodes,
        }


def _value_key(col: Column) -> bytes:
    if col.dtype in FLOAT_DTYPES:
        v = np.where(np.isnan(col.values), np.nan, col.values + 0.0)
        return hashlib.sha256(v.tobytes()).digest()
    return hashlib.sha256(repr(list(col.values)).encode()).digest()


def _is_constant(col: Column) -> bool:
    if col.dtype in FLOAT_DTYPES:
        present = col.values[~np.isnan(col.values)]
        return present.size == 0 or bool(np.all(present == present[0]))
    present = [v for v in col.values if v is not None]
    return len(set(present)) <= 1


class FeatureEnv:
    """Feature-search MDP over one (already exploited) dataset.

    ``evaluator`` replaces cross-validated performance with any
    ``Dataset -> float`` callable. ``raw_only`` restricts operands to features
    without a derivation, which is how the random baseline is defined.
    """

    def __init__(self, d: Dataset, kb: KnowledgeBase, cfg: SearchConfig = SearchConfig(), *,
                 graph: DecompositionGraph | None = None, learner: Learner | None = None,
                 evaluator: Callable[[Dataset], float] | None = None,
                 catalog: TransformCatalog = CATALOG, raw_only: bool = False):
        self.base = d
        self.kb = kb
        self.cfg = cfg
        self.catalog = catalog
        self.actions: list[Transform] = catalog.actions()
        self.graph = copy.deepcopy(graph) if graph is not None else seed_graph(d, kb, DEFAULT_UNKNOWN_SCORE)
        for name in d.feature_names:
            if name not in self.graph:
                self.graph.add_known(name, DEFAULT_UNKNOWN_SCORE, "raw")
        self.learner = learner or default_learner(d.task)
        self.raw_pool = [n for n in d.feature_names if not self.graph.incoming(n)] if raw_only else None
        self.space = StateSpace(kb)

        rng = np.random.default_rng(cfg.seed)
        if cfg.bootstrap_rows is not None and d.n_rows > cfg.bootstrap_rows:
            self.rows = np.sort(rng.choice(d.n_rows, cfg.bootstrap_rows, replace=False))
        else:
            self.rows = np.arange(d.n_rows)
        self.folds = make_folds(d.take_rows(self.rows), cfg.k, cfg.seed)
        y, _ = target_vector(d)
        self.y_eval = y[self.rows]
        self._evaluator = evaluator
        self._perf_cache: dict[tuple[str, ...], float] = {}
        self._mask_cache: dict[tuple[str, ...], np.ndarray] = {}
        self._step_cache: dict[tuple[tuple[str, ...], int], list[tuple[Column, tuple[str, ...], bool]]] = {}

    # -- performance -------------------------------------------------------

    def performance(self, d: Dataset) -> float:
        key = tuple(sorted(d.feature_names))
        if key not in self._perf_cache:
            if self._evaluator is not None:
                self._perf_cache[key] = float(self._evaluator(d))
            else:
                sample = d if len(self.rows) == d.n_rows else d.take_rows(self.rows)
                self._perf_cache[key] = cross_val(sample, self.folds, self.learner).mean
        return self._perf_cache[key]

    def mean_interp(self, names: Sequence[str]) -> float:
        return dataset_interpretability(self.graph, list(names))

    def objective(self, s: SearchState) -> float:
        return self.cfg.lam * s.perf + (1 - self.cfg.lam) * self.mean_interp(s.generated)

    # -- states ------------------------------------------------------------

    def reset(self) -> SearchState:
        perf = self.performance(self.base)
        return SearchState(self.base, 0, perf, perf_trace=(perf,), interp_trace=(0.0,))

    def vector(self, s: SearchState) -> np.ndarray:
        ctx = StepContext(s.step, self.cfg.m, s.last_reward, self.mean_interp(s.generated))
        return self.space.vectorize(s.dataset, ctx)

    def _pool(self, s: SearchState) -> list[str] | None:
        return self.raw_pool

    def _tuples(self, s: SearchState, t: Transform):
        tuples = applicable_operands(t, s.dataset, self.kb, features=self._pool(s))
        if self.cfg.drop_noninterp:
            tuples = [o for o in tuples if o.interpretable]
        return tuples

    def mask(self, s: SearchState) -> np.ndarray:
        if s.key not in self._mask_cache:
            if self.cfg.drop_noninterp:
                valid = [bool(self._tuples(s, t)) for t in self.actions]
            else:
                valid = [has_operands(t, s.dataset, self._pool(s)) for t in self.actions]
            self._mask_cache[s.key] = np.array(valid)
        return self._mask_cache[s.key]

    # -- candidate generation ------------------------------------------------

    def _rank(self, cols: list[Column], task: str) -> np.ndarray:
        """Mean over folds of each column's training-row relevance to the target."""
        if not cols:
            return np.zeros(0)
        y = self.y_eval
        scores = np.zeros(len(cols))
        if all(c.dtype in FLOAT_DTYPES for c in cols):
            X = np.column_stack([c.values[self.rows] for c in cols])
            for f in range(self.folds.k):
                train, _ = self.folds.split(f)
                if task == "regression":
                    train = train[~np.isnan(y[train])]
                    scores += _abs_corr(X[train], y[train])
                else:
                    train = train[y[train] >= 0]
                    scores += mutual_information_columns(X[train], y[train])
            return scores / self.folds.k
        for f in range(self.folds.k):
            train, _ = self.folds.split(f)
            ok = (y[train] >= 0) if task == "classification" else ~np.isnan(y[train])
            train = train[ok]
            for i, c in enumerate(cols):
                scores[i] += relevance(c.values[self.rows][train], y[train], task)
        return scores / self.folds.k

    def candidates(self, s: SearchState, a: int) -> list[tuple[Column, tuple[str, ...], bool]]:
        """The ``top_k`` new columns for action ``a`` in ``s`` with their operands and flag."""
        ck = (s.key, a)
        if ck in self._step_cache:
            return self._step_cache[ck]
        t = self.actions[a]
        d = s.dataset
        seen = {_value_key(c) for c in d.features}
        names = set(d.names)
        pool: list[tuple[Column, tuple[str, ...], bool]] = []
        for op in self._tuples(s, t):
            try:
                outs = apply(t, [d[n] for n in op.names], d, kb=self.kb)
            except (ValueError, KeyError, ArithmeticError):
                continue
            for col in outs:
                if col.name in names or col.absent.all() or _is_constant(col):
                    continue
                vk = _value_key(col)
                if vk in seen:
                    continue
                seen.add(vk)
                names.add(col.name)
                pool.append((col, op.names, not op.interpretable))
        scores = self._rank([c for c, _, _ in pool], d.task)
        order = sorted(range(len(pool)), key=lambda i: (-scores[i], i))[: self.cfg.top_k]
        chosen = [pool[i] for i in order]
        self._step_cache[ck] = chosen
        return chosen

    def step(self, s: SearchState, a: int) -> tuple[SearchState, float, bool, StepInfo]:
        t = self.actions[a]
        chosen = self.candidates(s, a) if self.mask(s)[a] else []
        d = s.dataset
        new_names = []
        for col, operands, flagged in chosen:
            d = append_feature(d, col, t.id)
            self.graph.add_application(t.id, operands, col.name, flagged)
            new_names.append(col.name)
        if new_names:
            perf = self.performance(d)
            delta = perf - s.perf
            interp_new = self.mean_interp(new_names)
            reward = self.cfg.lam * delta + (1 - self.cfg.lam) * interp_new
        else:
            perf, delta, interp_new, reward = s.perf, 0.0, 0.0, 0.0
        generated = s.generated + tuple(new_names)
        pipeline = s.pipeline
        if new_names:
            pipeline = pipeline + (PipelineStep(t.id, tuple(o for _, o, _ in chosen), tuple(new_names)),)
        nxt = SearchState(d, s.step + 1, perf, generated, pipeline, s.perf_trace + (perf,),
                          s.interp_trace + (self.mean_interp(generated),), s.gen_counts + (len(generated),),
                          reward)
        terminal = nxt.step >= self.cfg.m or not self.mask(nxt).any()
        return nxt, reward, terminal, StepInfo(t.id, new_names, delta, interp_new, perf)

    def result(self, best: SearchState, log: list[dict], episodes: int) -> PipelineResult:
        perf_trace = list(best.perf_trace)
        interp_trace = [self.mean_interp(best.generated[:n]) for n in best.gen_counts]
        obj = self.cfg.lam * perf_trace[-1] + (1 - self.cfg.lam) * interp_trace[-1]
        return PipelineResult(list(best.pipeline), best.dataset, perf_trace, interp_trace, obj,
                              self.cfg.lam, list(best.generated), self.graph, log, episodes)


def _abs_corr(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column-wise |Pearson r| with NaN cells replaced by the column mean."""
    ok = ~np.isnan(X)
    cnt = ok.sum(axis=0)
    means = np.where(cnt > 0, np.where(ok, X, 0.0).sum(axis=0) / np.maximum(cnt, 1), 0.0)
    Xc = np.where(ok, X, means) - means
    yc = y - y.mean()
    denom = np.sqrt((Xc ** 2).sum(axis=0)) * np.sqrt((yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(Xc.T @ yc) / denom
    return np.where(np.isfinite(r) & (cnt >= 3), r, 0.0)


# --------------------------------------------------------------------------
# search drivers


def _run(env: FeatureEnv, cfg: SearchConfig, choose) -> PipelineResult:
    s0 = env.reset()
    best, best_obj = s0, env.objective(s0)
    log: list[dict] = []
    for ep in range(cfg.episodes):
        s = env.reset()
        if not env.mask(s).any():
            break
        while True:
            a, extra = choose(env, s, ep)
            s2, r, terminal, info = env.step(s, a)
            extra = extra(s, a, r, s2, terminal) if callable(extra) else extra
            obj = env.objective(s2)
            log.append({"episode": ep, "step": s.step, "action": a, "transform": info.transform,
                        "n_new": len(info.new_features), "delta_perf": info.delta_perf,
                        "interp_new": info.interp_new, "reward": r, "perf": info.perf,
                        "objective": obj, **(extra or {})})
            if obj > best_obj + 1e-12:
                best, best_obj = s2, obj
            s = s2
            if terminal:
                break
    return env.result(best, log, cfg.episodes)


def train(d: Dataset, kb: KnowledgeBase, cfg: SearchConfig = SearchConfig(), *,
          graph: DecompositionGraph | None = None, learner: Learner | None = None,
          evaluator: Callable[[Dataset], float] | None = None,
          catalog: TransformCatalog = CATALOG) -> PipelineResult:
    """Deep Q-learning over transform choices; returns the best-objective state seen."""
    env = FeatureEnv(d, kb, cfg, graph=graph, learner=learner, evaluator=evaluator, catalog=catalog)
    agent = DQNAgent.create(env.space.size, len(env.actions), seed=cfg.seed, hidden=cfg.hidden, lr=cfg.lr,
                            gamma=cfg.gamma, batch_size=cfg.batch_size, capacity=cfg.buffer_capacity,
                            sync_period=cfg.sync_period, schedule=cfg.schedule)
    rng = np.random.default_rng(cfg.seed + 2)

    def choose(env, s, ep):
        vec = env.vector(s)
        a = select_action(agent.q, vec, agent.schedule, ep, env.mask(s), rng)

        def learn(s, a, r, s2, terminal):
            mask2 = env.mask(s2)
            loss = agent.observe(Transition(vec, a, r, env.vector(s2), terminal or not mask2.any(), mask2))
            return {"epsilon": agent.schedule.value(ep), "loss": loss}
        return a, learn

    return _run(env, cfg, choose)


def random_baseline(d: Dataset, kb: KnowledgeBase, cfg: SearchConfig = SearchConfig(), *,
                    graph: DecompositionGraph | None = None, learner: Learner | None = None,
                    evaluator: Callable[[Dataset], float] | None = None,
                    catalog: TransformCatalog = CATALOG) -> PipelineResult:
    """Uniformly random valid transforms applied to raw features only."""
    env = FeatureEnv(d, kb, cfg, graph=graph, learner=learner, evaluator=evaluator, catalog=catalog,
                     raw_only=True)
    rng = np.random.default_rng(cfg.seed + 2)

    def choose(env, s, ep):
        valid = np.flatnonzero(env.mask(s))
        return int(valid[rng.integers(len(valid))]), None

    return _run(env, cfg, choose)


# --------------------------------------------------------------------------
# search-space size and exhaustive search


def search_space_size_from_counts(p: int, counts: Mapping[int, int]) -> int:
    """Sum over operand counts n of P(p, n) times the number of n-operand transforms."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return sum(math.perm(p, n) * c for n, c in counts.items())


def transform_counts(transforms: Sequence[Transform]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for t in transforms:
        counts[t.n_operands] = counts.get(t.n_operands, 0) + 1
    return dict(sorted(counts.items()))


def search_space_size(p: int, catalog: TransformCatalog = CATALOG) -> int:
    """Number of (transform, ordered operand tuple) candidates over ``p`` features."""
    return search_space_size_from_counts(p, transform_counts(catalog.actions()))


def projected_oracle_count(p: int, depth: int, catalog: TransformCatalog = CATALOG) -> int:
    size = search_space_size(p, catalog)
    return sum(size ** j for j in range(1, depth + 1))


def exhaustive_oracle(d: Dataset, kb: KnowledgeBase, depth: int = 1, cfg: SearchConfig = SearchConfig(), *,
                      graph: DecompositionGraph | None = None, learner: Learner | None = None,
                      evaluator: Callable[[Dataset], float] | None = None,
                      catalog: TransformCatalog = CATALOG, budget: int = ORACLE_BUDGET) -> PipelineResult:
    """Evaluate every action sequence of length <= ``depth`` and return the best objective."""
    if not 0 <= depth <= 2:
        raise ValueError(f"depth must be 0, 1 or 2, got {depth}")
    count = projected_oracle_count(len(d.feature_names), depth, catalog)
    if count > budget:
        raise OracleBudgetError(count, budget)
    env = FeatureEnv(d, kb, cfg, graph=graph, learner=learner, evaluator=evaluator, catalog=catalog)
    s0 = env.reset()
    best, best_obj = s0, env.objective(s0)
    frontier = [s0]
    for _ in range(depth):
        nxt = []
        for s in frontier:
            for a in np.flatnonzero(env.mask(s)):
                s2, _, _, info = env.step(s, int(a))
                if not info.new_features:
                    continue
                obj = env.objective(s2)
                if obj > best_obj + 1e-12:
                    best, best_obj = s2, obj
                nxt.append(s2)
        frontier = nxt
    return env.result(best, [], 0)
