"""Meta-model guided exploration of a design graph under a fixed evaluation budget."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metamodel as mm
from .evaluators import EvaluationError, EvaluationRecord, Evaluator
from .graph import DesignGraph, LazyDesignGraph, build_subgraph, multi_hop_neighbors
from .space import ConfigurationError, DesignSpace, DomainError

log = logging.getLogger(__name__)

VARIANTS = ("falcon", "falcon_g", "falcon_lp")


class SearchAborted(RuntimeError):
    """More than half of the warm-up evaluations failed."""


def default_start_nodes(k: int) -> int:
    return min(math.ceil(0.10 * k), 10)


def default_topk(k: int) -> int:
    return min(math.ceil(0.10 * k), 5)


@dataclass
class SearchConfig:
    budget: int = 30
    start_nodes: int | None = None
    hops: int = 3
    warmup_budget: float = 50.0
    full_budget: float = 200.0
    seed: int = 0
    variant: str = "falcon"
    temperature: float = 0.1

    def __post_init__(self):
        if self.start_nodes is None:
            self.start_nodes = default_start_nodes(self.budget)
        if self.budget < 1:
            raise ConfigurationError("budget K must be >= 1")
        if not 1 <= self.start_nodes <= self.budget:
            raise ConfigurationError("start node count C must satisfy 1 <= C <= K")
        if self.hops < 1:
            raise ConfigurationError("hops must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")

    @property
    def topk(self) -> int:
        return default_topk(self.budget)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrajectoryRow:
    step: int
    design_id: int
    design: dict
    warmup_score: float
    predicted_score: float | None = None
    candidate_count: int | None = None


TRAJECTORY_COLUMNS = ["step", "design_id", "design_json", "warmup_score", "predicted_score", "candidate_count"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return repr(x)
    return str(x)


@dataclass
class SearchResult:
    strategy: str
    best_id: int | None
    best_design: dict | None
    best_full_score: float
    trajectory: list[TrajectoryRow]
    full_evaluations: list[dict]
    config: dict
    notes: list[str] = field(default_factory=list)

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in self.trajectory:
            w.writerow([
                r.step, r.design_id, json.dumps(r.design, sort_keys=True), _fmt(float(r.warmup_score)),
                _fmt(None if r.predicted_score is None else float(r.predicted_score)), _fmt(r.candidate_count),
            ])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "best_design_id": self.best_id,
            "best_design": self.best_design,
            "best_full_score": self.best_full_score,
            "full_evaluations": self.full_evaluations,
            "warmup_evaluations": len(self.trajectory),
            "notes": self.notes,
            "config": self.config,
        }

    def best_so_far(self) -> np.ndarray:
        scores = np.array([r.warmup_score for r in self.trajectory], dtype=float)
        return np.maximum.accumulate(scores) if len(scores) else scores


def write_run(result: SearchResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.csv").write_text(result.trajectory_csv())
    (out / "result.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True, default=_json_default))
    (out / "config.json").write_text(json.dumps(result.config, indent=2, sort_keys=True, default=_json_default))
    return out


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


class _Ledger:
    """Warm-up evaluations of one run, with failure accounting."""

    def __init__(self, space: DesignSpace, evaluator: Evaluator, budget: float, k: int):
        self.space, self.evaluator, self.budget, self.k = space, evaluator, budget, k
        self.ids: list[int] = []
        self.records: dict[int, EvaluationRecord] = {}
        self.rows: list[TrajectoryRow] = []
        self.failures = 0

    def explore(self, design_id: int, predicted: float | None = None, candidates: int | None = None) -> EvaluationRecord:
        design = self.space.design(design_id)
        try:
            rec = self.evaluator.evaluate(design, self.budget, full=False)
        except EvaluationError as exc:
            log.warning("evaluation of design %d failed: %s", design_id, exc)
            rec = EvaluationRecord.failure(self.budget)
        if rec.failed:
            self.failures += 1
        self.ids.append(design_id)
        self.records[design_id] = rec
        self.rows.append(TrajectoryRow(len(self.rows), design_id, design.assignment, rec.score, predicted, candidates))
        if self.failures > self.k / 2:
            raise SearchAborted(f"{self.failures} of {len(self.ids)} evaluations failed")
        return rec


def finalize(strategy: str, ledger: _Ledger, evaluator: Evaluator, full_budget: float, topk: int,
             config: dict, notes: list[str] | None = None) -> SearchResult:
    """Fully evaluate the best warm-up designs (ties by id) and return the winner."""
    ok = [i for i in ledger.ids if not ledger.records[i].failed]
    ranked = sorted(ok, key=lambda i: (-ledger.records[i].score, i))[:topk]
    fulls = []
    for i in ranked:
        design = ledger.space.design(i)
        try:
            rec = evaluator.evaluate(design, full_budget, full=True)
        except EvaluationError as exc:
            log.warning("full evaluation of design %d failed: %s", i, exc)
            rec = EvaluationRecord.failure(full_budget)
        fulls.append({"design_id": i, "warmup_score": ledger.records[i].score, "full_score": rec.score})
    best = max(fulls, key=lambda r: (r["full_score"], -r["design_id"]), default=None)
    if best is None or not np.isfinite(best["full_score"]):
        return SearchResult(strategy, None, None, float("-inf"), ledger.rows, fulls, config, notes or [])
    return SearchResult(
        strategy, best["design_id"], ledger.space.design(best["design_id"]).assignment,
        best["full_score"], ledger.rows, fulls, config, notes or [],
    )


def softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _normalize(y: np.ndarray) -> np.ndarray:
    if not len(y):
        return y
    lo, hi = y.min(), y.max()
    return (y - lo) / (hi - lo) if hi > lo else np.zeros_like(y)


def receptive_field_size(graph: LazyDesignGraph | DesignGraph, explored, h: int) -> int:
    """Number of unexplored designs within `h` hops of the explored set."""
    return len(multi_hop_neighbors(graph, explored, h))


@dataclass
class _RunState:
    explored: list[int]
    candidates: set[int]
    params: mm.Params | None = None
    predictions: dict[int, float] = field(default_factory=dict)


def run_falcon(space: DesignSpace, evaluator: Evaluator, config: SearchConfig,
               model_config: mm.MetaModelConfig | None = None,
               on_step: Callable[[_RunState], None] | None = None) -> SearchResult:
    """Graph-guided search: explore C random designs, then repeatedly train the
    meta-model on the explored subgraph and sample one candidate by softmax over
    its predictions, until K designs are explored; finish with full training of
    the top designs."""
    model_config = model_config or mm.MetaModelConfig()
    k, c, h = config.budget, config.start_nodes, config.hops
    if k > space.size:
        raise ConfigurationError(f"budget K={k} exceeds the {space.size} designs in the space")
    rng = np.random.default_rng(config.seed)
    graph = LazyDesignGraph(space)
    ledger = _Ledger(space, evaluator, config.warmup_budget, k)
    notes: list[str] = []
    variant = config.variant
    use_graph = variant != "falcon_g"
    want_instances = variant == "falcon"
    if want_instances and not evaluator.has_instances:
        notes.append("evaluator provides no instance vectors; task-specific channel disabled")
        log.info(notes[-1])
        want_instances = False
    width = model_config.instance_sample_size

    starts = np.sort(rng.choice(space.size, size=c, replace=False))
    for i in starts:
        ledger.explore(int(i))
    state = _RunState(list(ledger.ids), multi_hop_neighbors(graph, ledger.ids, h))
    state.candidates -= set(ledger.ids)

    n_labels = len(space.coordinates)

    def reinit(r):
        return mm.init_params(model_config, space.feature_width, n_labels, width, r, use_graph)

    while len(ledger.ids) < k:
        explored = set(ledger.ids)
        if not state.candidates:
            state.candidates = set(range(space.size)) - explored
            notes.append(f"step {len(ledger.ids)}: candidate set exhausted; widened to all unexplored designs")
        sub = build_subgraph(graph, explored, state.candidates)
        nodes = sub.graph.nodes
        pos = {int(v): p for p, v in enumerate(nodes)}
        ok = [i for i in ledger.ids if not ledger.records[i].failed]
        train_idx = np.array([pos[i] for i in ok], dtype=np.int64)
        targets = _normalize(np.array([ledger.records[i].score for i in ok]))

        channel = np.zeros((len(nodes), width))
        if want_instances:
            anchors = [i for i in ok if ledger.records[i].instance_correct is not None]
            if anchors:
                matrix = np.stack([ledger.records[i].instance_correct for i in anchors]).astype(float)
                cols = mm.select_instances(matrix, width, rng)
                y0 = np.zeros((len(nodes), width))
                y0[[pos[i] for i in anchors], : len(cols)] = matrix[:, cols]
                channel = mm.label_propagate(sub.graph, y0, model_config.alpha, model_config.lp_layers)
        inputs = mm.ModelInputs.build(sub.graph, channel)

        if state.params is None:
            state.params = reinit(rng)
        if len(train_idx) >= 2:
            state.params = mm.train(state.params, model_config, inputs, train_idx, targets, rng, reinit).params
        pred = mm.forward(state.params, inputs)

        cand = np.array(sorted(state.candidates), dtype=np.int64)
        cand_pred = pred[[pos[int(i)] for i in cand]]
        probs = softmax(cand_pred, config.temperature)
        choice = int(cand[rng.choice(len(cand), p=probs)])
        state.predictions = dict(zip(cand.tolist(), cand_pred.tolist()))
        ledger.explore(choice, float(pred[pos[choice]]), len(cand))
        state.explored = list(ledger.ids)
        state.candidates.discard(choice)
        state.candidates |= multi_hop_neighbors(graph, [choice], h) - set(ledger.ids)
        if on_step is not None:
            on_step(state)

    run_config = {
        "strategy": variant,
        "space": space.to_dict(),
        "evaluator": evaluator.describe(),
        "search": config.to_dict(),
        "model": model_config.to_dict(),
    }
    return finalize(variant, ledger, evaluator, config.full_budget, config.topk, run_config, notes)


def run_variant(variant: str, space: DesignSpace, evaluator: Evaluator, config: SearchConfig,
                model_config: mm.MetaModelConfig | None = None) -> SearchResult:
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    cfg = SearchConfig(**{**config.to_dict(), "variant": variant})
    return run_falcon(space, evaluator, cfg, model_config)
