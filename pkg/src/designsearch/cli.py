"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or parse failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import metamodel as mm
from .baselines import run_bruteforce, run_random, run_sa
from .evaluators import DataError, EvaluationError, generate_synthetic, parse_evaluator_spec, write_tabular
from .graph import build_graph_with_stats
from .search import TRAJECTORY_COLUMNS, SearchAborted, SearchConfig, SearchResult, run_falcon, write_run
from .space import ConfigurationError, DesignSpace, DomainError, load_space

STRATEGIES = ("falcon", "falcon_g", "falcon_lp", "random", "sa", "bruteforce")

log = logging.getLogger("designsearch")


class UsageError(Exception):
    pass


def _space_arg(value: str) -> DesignSpace:
    return load_space(value)


def cmd_build_graph(args) -> int:
    space = _space_arg(args.space)
    t0 = time.perf_counter()
    graph, stats = build_graph_with_stats(space)
    stats["total_seconds"] = time.perf_counter() - t0
    text = json.dumps(stats, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.edges:
        labels = space.coordinates
        with open(args.edges, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "label"])
            for (u, v), lab in zip(graph.edges, graph.labels):
                w.writerow([int(u), int(v), labels[int(lab)]])
    return 0


def run_from_config(cfg: dict, space: DesignSpace | None = None) -> SearchResult:
    """Execute a run described by a config.json echo."""
    try:
        strategy = cfg["strategy"]
        space = space or DesignSpace.from_dict(cfg["space"])
        evaluator = parse_evaluator_spec(cfg["evaluator"], space)
        params = dict(cfg["search"])
    except KeyError as exc:
        raise ConfigurationError(f"config is missing field {exc.args[0]!r}") from None
    if strategy in ("falcon", "falcon_g", "falcon_lp"):
        search = SearchConfig(**params)
        model = mm.MetaModelConfig(**cfg.get("model", {}))
        return run_falcon(space, evaluator, search, model)
    if strategy == "random":
        return run_random(space, evaluator, params["budget"], params["warmup_budget"], params["full_budget"], params["seed"])
    if strategy == "sa":
        return run_sa(space, evaluator, params["budget"], params["warmup_budget"], params["full_budget"],
                      params["seed"], params["t0"], params["cooling"])
    if strategy == "bruteforce":
        return run_bruteforce(space, evaluator, params["fraction"], params["warmup_budget"], params["full_budget"],
                              params["seed"])
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def build_config(args, space: DesignSpace) -> dict:
    evaluator = parse_evaluator_spec(args.evaluator, space)
    strategy = args.strategy
    base = {"strategy": strategy, "space": space.to_dict(), "evaluator": evaluator.describe()}
    if strategy in ("falcon", "falcon_g", "falcon_lp"):
        search = SearchConfig(budget=args.budget, start_nodes=args.start_nodes, hops=args.hops,
                              warmup_budget=args.warmup_budget, full_budget=args.full_budget, seed=args.seed,
                              variant=strategy, temperature=args.temperature)
        model = mm.MetaModelConfig()
        return {**base, "search": search.to_dict(), "model": model.to_dict()}
    common = {"warmup_budget": args.warmup_budget, "full_budget": args.full_budget, "seed": args.seed}
    if strategy == "random":
        return {**base, "search": {"budget": args.budget, **common}}
    if strategy == "sa":
        return {**base, "search": {"budget": args.budget, "t0": args.t0, "cooling": args.cooling, **common}}
    return {**base, "search": {"fraction": args.fraction, **common}}


def cmd_search(args) -> int:
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    else:
        if not (args.space and args.evaluator):
            raise UsageError("search needs --space and --evaluator (or --config)")
        cfg = build_config(args, _space_arg(args.space))
    result = run_from_config(cfg)
    out = write_run(result, args.out)
    print(json.dumps({"best_design_id": result.best_id, "best_full_score": result.best_full_score,
                      "out": str(out)}))
    return 0


def _load_run(run_dir: Path) -> tuple[str, np.ndarray]:
    traj = run_dir / "trajectory.csv"
    res = run_dir / "result.json"
    if not traj.is_file() or not res.is_file():
        raise FileNotFoundError(str(run_dir))
    with open(traj, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJECTORY_COLUMNS:
            raise ValueError(str(traj))
        scores = [float(row[3]) for row in reader]
    strategy = json.loads(res.read_text())["strategy"]
    best = np.maximum.accumulate(np.array(scores)) if scores else np.zeros(0)
    return strategy, best


def aggregate_curves(run_dirs: list[Path]) -> list[dict]:
    """Best-so-far warm-up score vs evaluation count, mean and standard error per strategy."""
    curves: dict[str, list[np.ndarray]] = {}
    bad = []
    for d in run_dirs:
        try:
            strategy, best = _load_run(Path(d))
        except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError):
            bad.append(str(d))
            continue
        curves.setdefault(strategy, []).append(best)
    if bad:
        raise ConfigurationError("runs with missing or mismatched schema: " + ", ".join(bad))
    rows = []
    for strategy in sorted(curves):
        runs = curves[strategy]
        length = max(len(r) for r in runs)
        mat = np.array([np.concatenate([r, np.full(length - len(r), r[-1] if len(r) else np.nan)]) for r in runs])
        n = len(runs)
        mean = mat.mean(axis=0)
        se = mat.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(length)
        for step in range(length):
            rows.append({"strategy": strategy, "evaluations": step + 1, "mean_best": float(mean[step]),
                         "stderr": float(se[step]), "runs": n})
    return rows


def cmd_compare(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    if args.strategies:
        if not (args.space and args.evaluator and args.out_root):
            raise UsageError("multi-seed compare needs --space, --evaluator and --out-root")
        space = _space_arg(args.space)
        root = Path(args.out_root)
        for strategy in args.strategies.split(","):
            if strategy not in STRATEGIES:
                raise UsageError(f"unknown strategy {strategy!r}")
            for seed in range(args.seeds):
                ns = argparse.Namespace(**{**vars(args), "strategy": strategy, "seed": seed})
                result = run_from_config(build_config(ns, space), space)
                run_dirs.append(write_run(result, root / f"{strategy}-seed{seed}"))
    if not run_dirs:
        raise UsageError("compare needs run directories or --strategies")
    rows = aggregate_curves(run_dirs)
    fields = ["strategy", "evaluations", "mean_best", "stderr", "runs"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_make_tabular(args) -> int:
    space = _space_arg(args.space)
    land = generate_synthetic(space, args.seed, args.smoothness, n_instances=args.instances)
    write_tabular(args.out, land.warmup, land.full, land.instances if args.instances else None)
    print(json.dumps(land.stats))
    return 0


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--space", help="space declaration file or bundled name (node_level, graph_level, toy)")
    p.add_argument("--evaluator", help="tabular:PATH | synthetic:SEED:SMOOTHNESS | exec:COMMAND")
    p.add_argument("--budget", type=int, default=30, help="exploration size K")
    p.add_argument("--start-nodes", type=int, default=None, help="start designs C (default min(ceil(0.1K), 10))")
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--warmup-budget", type=float, default=50.0)
    p.add_argument("--full-budget", type=float, default=200.0)
    p.add_argument("--temperature", type=float, default=SearchConfig.temperature)
    p.add_argument("--t0", type=float, default=0.05, help="initial simulated-annealing temperature")
    p.add_argument("--cooling", type=float, default=0.9)
    p.add_argument("--fraction", type=float, default=0.05, help="bruteforce sample fraction")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="designsearch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="build a design graph and report its statistics")
    p.add_argument("--space", required=True)
    p.add_argument("--out", help="write stats JSON here as well as stdout")
    p.add_argument("--edges", help="write the edge list as CSV (u,v,label)")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("search", help="run one search strategy")
    _add_run_flags(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="falcon")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="re-run from a config.json written by a previous run")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare", help="aggregate best-so-far curves across runs")
    p.add_argument("runs", nargs="*", help="completed run directories")
    _add_run_flags(p)
    p.add_argument("--strategies", help="comma-separated strategies to run before aggregating")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out-root", help="directory for the multi-seed runs")
    p.add_argument("--out", help="aggregate CSV path (default stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("make-tabular", help="write a synthetic landscape as a tabular benchmark CSV")
    p.add_argument("--space", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smoothness", type=float, default=0.02)
    p.add_argument("--instances", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_tabular)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvaluationError, SearchAborted, DomainError, mm.TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
