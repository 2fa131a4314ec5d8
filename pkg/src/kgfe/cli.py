"""Command-line front end.

``kgfe run`` (the default subcommand) loads a CSV, maps and exploits it with a
knowledge base, searches transforms with the DQN, and writes report.json,
augmented.csv, decomp.dot, decomp.json, importance.svg and timings.json into
``--out``. Outputs are staged in a scratch directory and only moved into place
once every file has been written.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from xml.sax.saxutils import escape

from . import __version__
from .agent import DivergenceError
from .decomp import (DecompositionGraph, dataset_interpretability, export_dot, export_json,
                     interpretability_sum)
from .evaluator import FEATURE_CAP, LEARNERS, EvaluationError, Learner, cross_val, default_learner
from .importance import permutation_importance
from .kg_store import KGError, KnowledgeBase, load_demo_kg, map_columns, parse_kg
from .reasoner import DEFAULT_MAX_DEPTH, DEFAULT_UNKNOWN_SCORE, exploit
from .search_env import (ORACLE_BUDGET, ConfigError, OracleBudgetError, SearchConfig, exhaustive_oracle,
                         search_space_size, search_space_size_from_counts, train)
from .tabular import TASKS, TabularError, load_csv, load_schema_hints, make_folds, write_csv
from .transforms import CATALOG

log = logging.getLogger("kgfe")

LEARNER_ALIASES = {
    "ridge": "linear_regression_ridge",
    "tree": "decision_tree",
    "logistic": "logistic_regression",
}
SVG_WIDTH, SVG_HEIGHT = 800, 400
SVG_TOP_N = 20
COLOR_GENERATED = "#1f77b4"
COLOR_KNOWN = "#ff7f0e"


class UsageError(Exception):
    """Invalid configuration; maps to exit code 2."""


_FIELD_TYPES = {
    "k": int, "episodes": int, "m": int, "top_k": int, "seed": int, "max_depth": int,
    "importance_repeats": int, "bootstrap_rows": (int, type(None)), "lam": (int, float),
    "unknown_score": (int, float), "drop_noninterp": bool,
}


def _checked(name: str, value):
    want = _FIELD_TYPES.get(name, (str, type(None)))
    bad_bool = isinstance(value, bool) and want is not bool
    if bad_bool or not isinstance(value, want):
        raise UsageError(f"config key {name!r} has invalid value {value!r}")
    return value


@dataclass
class JobConfig:
    data: str | None = None
    target: str | None = None
    kg: str | None = None
    schema: str | None = None
    task: str | None = None
    learner: str | None = None
    k: int = 5
    lam: float = 0.7
    episodes: int = 50
    m: int = 5
    top_k: int = 8
    seed: int = 0
    out: str = "kgfe_out"
    bootstrap_rows: int | None = 5000
    drop_noninterp: bool = False
    max_depth: int = DEFAULT_MAX_DEPTH
    unknown_score: float = DEFAULT_UNKNOWN_SCORE
    importance_repeats: int = 5

    # JSON key -> field name where they differ
    ALIASES = {"lambda": "lam"}

    @classmethod
    def from_mapping(cls, data: dict) -> "JobConfig":
        names = {f.name for f in fields(cls)}
        out = {}
        for key, value in data.items():
            name = cls.ALIASES.get(key, key).replace("-", "_")
            if name not in names:
                raise UsageError(f"unknown config key {key!r}")
            out[name] = _checked(name, value)
        return cls(**out)

    def validate(self) -> None:
        if not self.data:
            raise UsageError("--data is required")
        if not self.target:
            raise UsageError("--target is required")
        if self.task is not None and self.task not in TASKS:
            raise UsageError(f"--task must be one of {sorted(TASKS)}")
        if self.learner is not None and LEARNER_ALIASES.get(self.learner, self.learner) not in LEARNERS:
            raise UsageError(f"unknown learner {self.learner!r}")
        if not 0.0 <= self.unknown_score <= 1.0:
            raise UsageError("unknown_score must lie in [0,1]")
        if self.max_depth < 0 or self.importance_repeats < 1:
            raise UsageError("max_depth must be >= 0 and importance_repeats >= 1")
        try:
            self.search_config()
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc

    def search_config(self) -> SearchConfig:
        return SearchConfig(lam=self.lam, m=self.m, episodes=self.episodes, top_k=self.top_k,
                            drop_noninterp=self.drop_noninterp, bootstrap_rows=self.bootstrap_rows,
                            seed=self.seed, k=self.k)

    def learner_for(self, task: str) -> Learner:
        if self.learner is None:
            return default_learner(task)
        return Learner(LEARNER_ALIASES.get(self.learner, self.learner))

    def echo(self) -> dict:
        """Every setting that shapes the results; the output location is left out."""
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        del d["out"]
        return dict(sorted(d.items()))


# --------------------------------------------------------------------------
# run


def _load_kb(path: str | None) -> KnowledgeBase:
    return load_demo_kg() if path is None else parse_kg(path)


def importance_svg(ranking: list[tuple[str, float]], generated: set[str]) -> str:
    """Horizontal bar chart of the top features; generated ones in blue, the rest orange."""
    top = ranking[:SVG_TOP_N]
    left, right, top_pad, bottom_pad = 330, 20, 30, 10
    band = (SVG_HEIGHT - top_pad - bottom_pad) / SVG_TOP_N
    peak = max([v for _, v in top if v > 0], default=1.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="#ffffff"/>',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">Permutation importance '
        f'(blue: generated, orange: raw or exploited)</text>',
    ]
    for i, (name, value) in enumerate(top):
        y = top_pad + i * band
        w = max(value, 0.0) / peak * (SVG_WIDTH - left - right)
        color = COLOR_GENERATED if name in generated else COLOR_KNOWN
        label = name if len(name) <= 48 else name[:45] + "..."
        out.append(f'<text x="{left - 6}" y="{y + band * 0.7:.2f}" font-family="sans-serif" font-size="10" '
                   f'text-anchor="end">{escape(label)}</text>')
        out.append(f'<rect x="{left}" y="{y + 2:.2f}" width="{w:.2f}" height="{band - 4:.2f}" '
                   f'fill="{color}"><title>{escape(name)}: {value:.6f}</title></rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def run(cfg: JobConfig) -> dict:
    """Execute one job and write its outputs; returns the report."""
    cfg.validate()
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = round(now - clock, 6)
        clock = now

    schema = load_schema_hints(cfg.schema) if cfg.schema else None
    raw = load_csv(cfg.data, cfg.target, schema, cfg.task)
    kb = _load_kb(cfg.kg)
    mapped = map_columns(kb, raw)
    lap("load")
    exploited, trace, graph = exploit(mapped, kb, cfg.max_depth, cfg.unknown_score)
    lap("exploit")
    scfg = cfg.search_config()
    learner = cfg.learner_for(raw.task)
    result = train(exploited, kb, scfg, graph=graph, learner=learner)
    lap("search")

    folds = make_folds(mapped, cfg.k, cfg.seed)
    evals = {name: cross_val(ds, folds, learner)
             for name, ds in (("base", mapped), ("exploited", exploited), ("final", result.best_dataset))}
    lap("evaluate")
    ranking = permutation_importance(result.best_dataset, learner, folds, cfg.importance_repeats, cfg.seed)
    lap("importance")

    final_graph = result.graph.subgraph(result.best_dataset.feature_names)
    scores = {n: final_graph.interpretability(n) for n in result.best_dataset.feature_names}
    generated = set(result.generated)
    report = {
        "version": __version__,
        "config": {
            "job": cfg.echo(),
            "search": scfg.to_dict(),
            "learner": learner.to_dict(),
            "interp_weights": dict(sorted(graph.interp_weights.items())),
            "constants": {"oracle_budget": ORACLE_BUDGET, "feature_cap": FEATURE_CAP, "svg_top_n": SVG_TOP_N},
        },
        "dataset": {"target": raw.target, "task": raw.task, "rows": raw.n_rows,
                    "raw_features": raw.feature_names, "fingerprint": raw.fingerprint()},
        "exploitation": {**trace.to_dict(), "features": [n for n in exploited.feature_names
                                                         if n not in mapped]},
        "evaluation": {k: v.to_dict() for k, v in evals.items()},
        "search": {**result.to_dict(),
                   "search_space_size": search_space_size(len(exploited.feature_names))},
        "interpretability": {
            "features": scores,
            "generated_mean": dataset_interpretability(final_graph, result.generated),
            "generated_sum": interpretability_sum(final_graph, result.generated),
            "all_mean": dataset_interpretability(final_graph, result.best_dataset.feature_names),
        },
        "objective": {
            "lambda": scfg.lam,
            "performance": result.perf,
            "mean_interpretability": result.mean_interp,
            "value": result.objective,
        },
        "importance": [{"feature": n, "importance": v, "generated": n in generated} for n, v in ranking],
    }
    _write_outputs(Path(cfg.out), report, result.best_dataset, final_graph, ranking, generated, timings)
    return report


def _write_outputs(out: Path, report: dict, d, g: DecompositionGraph, ranking, generated, timings) -> None:
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        (staging / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        write_csv(d, staging / "augmented.csv")
        (staging / "decomp.dot").write_text(export_dot(g), encoding="utf-8")
        (staging / "decomp.json").write_text(export_json(g), encoding="utf-8")
        (staging / "importance.svg").write_text(importance_svg(ranking, generated), encoding="utf-8")
        (staging / "timings.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
        for f in sorted(staging.iterdir()):
            f.replace(out / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


# --------------------------------------------------------------------------
# argument parsing

TOP_LEVEL_FLAGS = ("--list-transforms", "--version", "--help", "--verbose")


def _add_job_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file of job settings; flags override it")
    p.add_argument("--data", default=S, help="input CSV")
    p.add_argument("--target", default=S, help="target column")
    p.add_argument("--kg", default=S, help="knowledge base file (default: bundled demo)")
    p.add_argument("--schema", default=S, help="JSON schema hints for the CSV")
    p.add_argument("--task", default=S, choices=sorted(TASKS))
    p.add_argument("--learner", default=S, help="ridge, tree or logistic (default by task)")
    p.add_argument("--k", type=int, default=S, help="cross-validation folds (5)")
    p.add_argument("--lambda", dest="lam", type=float, default=S, help="performance weight (0.7)")
    p.add_argument("--episodes", type=int, default=S, help="training episodes (50)")
    p.add_argument("--m", type=int, default=S, help="transforms per episode (5)")
    p.add_argument("--top-k", dest="top_k", type=int, default=S, help="new features kept per step (8)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory (kgfe_out)")
    p.add_argument("--bootstrap-rows", dest="bootstrap_rows", type=int, default=S,
                   help="row sample used for rewards on large data (5000)")
    p.add_argument("--drop-noninterp", dest="drop_noninterp", action="store_true", default=S,
                   help="discard candidates flagged non-interpretable")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=S, help="exploitation rounds (3)")
    p.add_argument("--importance-repeats", dest="importance_repeats", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgfe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"kgfe {__version__}")
    parser.add_argument("--list-transforms", action="store_true", help="print the transform catalog")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    _add_job_flags(sub.add_parser("run", help="exploit and search one dataset"))

    p = sub.add_parser("score-feature", help="interpretability of a feature from a finished run")
    p.add_argument("feature")
    p.add_argument("--run", default="kgfe_out", help="output directory of a previous run")

    sub.add_parser("list-transforms", help="print the transform catalog as JSON")

    p = sub.add_parser("check-kg", help="parse and link-check a knowledge base")
    p.add_argument("path", nargs="?", help="knowledge base file (default: bundled demo)")

    p = sub.add_parser("space-size", help="count single-step candidates over p features")
    p.add_argument("--p", type=int, required=True)
    for name, n in (("unary", 1), ("binary", 2), ("ternary", 3), ("quaternary", 4)):
        p.add_argument(f"--{name}", type=int, default=None, help=f"number of {n}-operand transforms")

    p = sub.add_parser("oracle", help="exhaustive search over short pipelines")
    _add_job_flags(p)
    p.add_argument("--depth", type=int, default=1)
    return parser


def _job_config(args: argparse.Namespace) -> JobConfig:
    settings: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                settings = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(settings, dict):
            raise UsageError("config file must hold a JSON object")
    cfg = JobConfig.from_mapping(settings)
    for f in fields(JobConfig):
        if hasattr(args, f.name):
            setattr(cfg, f.name, getattr(args, f.name))
    return cfg


def _cmd_score_feature(args) -> int:
    path = Path(args.run) / "decomp.json"
    try:
        g = DecompositionGraph.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if args.feature not in g:
        raise UsageError(f"feature {args.feature!r} is not in {path}")
    print(json.dumps({"feature": args.feature, "interpretability": g.interpretability(args.feature)}))
    return 0


def _cmd_check_kg(args) -> int:
    kb = _load_kb(args.path)
    print(f"OK: {len(kb.concepts)} concepts, {len(kb.units)} units, {len(kb.column_mappings)} mappings, "
          f"{len(kb.derivation_rules)} derivation rules, {len(kb.interp_rules)} interpretability rules, "
          f"{len(kb.triples)} triples")
    return 0


def _cmd_space_size(args) -> int:
    counts = {n: c for n, c in ((1, args.unary), (2, args.binary), (3, args.ternary), (4, args.quaternary))
              if c is not None}
    if args.p < 1:
        raise UsageError("--p must be >= 1")
    if any(c < 0 for c in counts.values()):
        raise UsageError("transform counts must be >= 0")
    print(search_space_size_from_counts(args.p, counts) if counts else search_space_size(args.p, CATALOG))
    return 0


def _cmd_oracle(args) -> int:
    cfg = _job_config(args)
    cfg.validate()
    schema = load_schema_hints(cfg.schema) if cfg.schema else None
    raw = load_csv(cfg.data, cfg.target, schema, cfg.task)
    kb = _load_kb(cfg.kg)
    exploited, _, graph = exploit(map_columns(kb, raw), kb, cfg.max_depth, cfg.unknown_score)
    result = exhaustive_oracle(exploited, kb, args.depth, cfg.search_config(), graph=graph,
                               learner=cfg.learner_for(raw.task))
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # bare job flags mean "run"
    if argv and argv[0].startswith("--") and argv[0] not in TOP_LEVEL_FLAGS:
        argv.insert(0, "run")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.list_transforms or args.command == "list-transforms":
            print(json.dumps(CATALOG.describe(), indent=2))
            return 0
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        if args.command == "run":
            report = run(_job_config(args))
            ev = report["evaluation"]
            print(f"{ev['base']['metric']}: base {ev['base']['mean']:.4f}, exploited "
                  f"{ev['exploited']['mean']:.4f}, final {ev['final']['mean']:.4f}; "
                  f"objective {report['objective']['value']:.4f}")
            return 0
        handler = {"score-feature": _cmd_score_feature, "check-kg": _cmd_check_kg,
                   "space-size": _cmd_space_size, "oracle": _cmd_oracle}[args.command]
        return handler(args)
    except (UsageError, TabularError, KGError, ConfigError, OracleBudgetError, FileNotFoundError) as exc:
        print(f"kgfe: error: {exc}", file=sys.stderr)
        return 2
    except (EvaluationError, DivergenceError, ValueError, RuntimeError, OSError) as exc:
        print(f"kgfe: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
