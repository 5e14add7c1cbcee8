from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest

from designsearch import metamodel as mm
from designsearch.baselines import run_random
from designsearch.evaluators import CountingEvaluator, EvaluationError, TableEvaluator, generate_synthetic
from designsearch.graph import LazyDesignGraph, build_graph
from designsearch.search import (
    TRAJECTORY_COLUMNS,
    SearchAborted,
    SearchConfig,
    default_start_nodes,
    default_topk,
    receptive_field_size,
    run_falcon,
    run_variant,
    softmax,
    write_run,
)
from designsearch.space import ConfigurationError, DesignSpace, Dimension

FAST = mm.MetaModelConfig(hidden_dim=8, max_train_epochs=20)


@pytest.fixture(scope="module")
def land(node_space):
    return generate_synthetic(node_space, 11, 0.02)


def test_defaults():
    cfg = SearchConfig()
    assert cfg.budget == 30
    assert cfg.start_nodes == 3 == default_start_nodes(30)
    assert cfg.topk == 3 == default_topk(30)
    assert cfg.hops == 3
    assert default_start_nodes(500) == 10
    assert default_topk(500) == 5


@pytest.mark.parametrize("bad", [{"budget": 0}, {"budget": 5, "start_nodes": 6}, {"hops": 0},
                                 {"variant": "other"}, {"temperature": 0}])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        SearchConfig(**bad)


def test_softmax_ratio_and_symmetry():
    p = softmax(np.array([0.3, 1.0]), 1.0)
    assert p[1] / p[0] == pytest.approx(math.exp(0.7))
    assert softmax(np.full(7, 0.42)) == pytest.approx(np.full(7, 1 / 7))


def test_equal_predictions_sample_uniformly(monkeypatch, toy):
    # force a constant predictor: every candidate must be equally likely
    monkeypatch.setattr(mm, "forward", lambda params, inputs: np.zeros(inputs.n))
    ev = generate_synthetic(toy, 0, 0.1)
    counts = np.zeros(toy.size)
    for seed in range(600):
        res = run_falcon(toy, ev, SearchConfig(budget=2, start_nodes=1, hops=3, seed=seed), FAST)
        counts[res.trajectory[1].design_id] += 1
    # the second pick is uniform over the 5 non-start designs, so overall frequencies are flat
    assert counts / counts.sum() == pytest.approx(np.full(6, 1 / 6), abs=0.04)


def test_k_equals_c_has_no_model_steps(land, node_space):
    ev = CountingEvaluator(land)
    res = run_falcon(node_space, ev, SearchConfig(budget=4, start_nodes=4, seed=1), FAST)
    ids = [r.design_id for r in res.trajectory]
    assert len(ids) == 4 and all(r.predicted_score is None for r in res.trajectory)
    top = sorted(ids, key=lambda i: (-land.warmup[i], i))[:default_topk(4)]
    assert res.best_id == max(top, key=lambda i: land.full[i])
    assert ev.warmup_calls == 4 and ev.full_calls == 1


@pytest.mark.parametrize("variant", ["falcon", "falcon_g", "falcon_lp"])
def test_budget_law(variant, land, node_space):
    ev = CountingEvaluator(land)
    run_falcon(node_space, ev, SearchConfig(budget=12, seed=2, variant=variant), FAST)
    assert ev.warmup_calls == 12
    assert ev.full_calls == default_topk(12) == 2
    assert len({i for i, full in ev.calls if not full}) == 12


def test_candidate_soundness_and_state(land, node_space):
    seen = []

    def hook(state):
        assert not set(state.explored) & state.candidates
        seen.append(list(state.explored))

    cfg = SearchConfig(budget=15, start_nodes=2, hops=2, seed=4)
    res = run_falcon(node_space, land, cfg, FAST, on_step=hook)
    ids = [r.design_id for r in res.trajectory]
    assert len(seen) == 13
    for t in range(2, len(ids)):
        # on a group-free space graph hops equal design distance
        assert min(node_space.distance(ids[t], p) for p in ids[:t]) <= 2


def test_run_is_deterministic(land, node_space):
    a = run_falcon(node_space, land, SearchConfig(budget=10, seed=5), FAST)
    b = run_falcon(node_space, land, SearchConfig(budget=10, seed=5), FAST)
    assert a.trajectory_csv() == b.trajectory_csv()
    c = run_falcon(node_space, land, SearchConfig(budget=10, seed=6), FAST)
    assert a.trajectory_csv() != c.trajectory_csv()


def test_variants_share_start_designs(land, node_space):
    runs = [run_variant(v, node_space, land, SearchConfig(budget=8, start_nodes=3, seed=3), FAST)
            for v in ("falcon", "falcon_g", "falcon_lp")]
    firsts = [[(r.design_id, r.warmup_score) for r in run.trajectory[:3]] for run in runs]
    assert firsts[0] == firsts[1] == firsts[2]


def test_falcon_lp_equals_falcon_without_instances(land, node_space):
    bare = TableEvaluator(node_space, land.warmup, land.full)
    a = run_variant("falcon", node_space, bare, SearchConfig(budget=10, seed=8), FAST)
    b = run_variant("falcon_lp", node_space, bare, SearchConfig(budget=10, seed=8), FAST)
    assert a.trajectory_csv() == b.trajectory_csv()
    assert any("instance" in n for n in a.notes)


class Flaky(TableEvaluator):
    def __init__(self, inner, bad):
        super().__init__(inner.space, inner.warmup, inner.full, inner.instances)
        self.bad = bad

    def evaluate(self, design, budget, full=False):
        if self.bad(design.id):
            raise EvaluationError("boom")
        return super().evaluate(design, budget, full)


def test_failed_designs_are_recorded_and_skipped(land, node_space):
    ev = Flaky(land, lambda i: i % 5 == 0)
    res = run_falcon(node_space, ev, SearchConfig(budget=12, seed=9), FAST)
    failed = [r for r in res.trajectory if r.design_id % 5 == 0]
    assert all(r.warmup_score == float("-inf") for r in failed)
    assert all(f["design_id"] % 5 for f in res.full_evaluations)


def test_majority_failure_aborts(land, node_space):
    with pytest.raises(SearchAborted):
        run_falcon(node_space, Flaky(land, lambda i: True), SearchConfig(budget=10, seed=0), FAST)


def test_receptive_field_examples(toy):
    k5 = DesignSpace([Dimension("c", "categorical", tuple("abcde"))])
    assert receptive_field_size(build_graph(k5), [0], 1) == 4
    assert receptive_field_size(LazyDesignGraph(toy), [0], 3) == 5


def test_receptive_field_grows_with_hops(node_space):
    g = LazyDesignGraph(node_space)
    sizes = [receptive_field_size(g, [7, 900], h) for h in range(1, 6)]
    assert sizes == sorted(sizes) and sizes[0] < sizes[-1]


def test_trajectory_and_result_files(land, node_space, tmp_path):
    res = run_falcon(node_space, land, SearchConfig(budget=6, seed=1), FAST)
    out = write_run(res, tmp_path / "run")
    rows = list(csv.reader(io.StringIO((out / "trajectory.csv").read_text())))
    assert rows[0] == TRAJECTORY_COLUMNS
    assert len(rows) == 7
    assert json.loads(rows[1][2]) == node_space.design(int(rows[1][1])).assignment
    result = json.loads((out / "result.json").read_text())
    assert result["best_design_id"] == res.best_id
    config = json.loads((out / "config.json").read_text())
    assert config["search"]["budget"] == 6 and config["model"]["hidden_dim"] == 8


def test_single_peak_landscape_beats_random(node_space):
    """Score = -distance to a hidden optimum; guided search should rank better than random."""
    peak = 2345
    score = 1.0 - node_space.distances_from(peak) / 13.0
    ev = TableEvaluator(node_space, score, score)
    order = np.sort(score)[::-1]

    def rank(run):
        best = max(r.warmup_score for r in run.trajectory)
        return int(np.sum(order > best))

    f = [rank(run_falcon(node_space, ev, SearchConfig(seed=s))) for s in range(20)]
    r = [rank(run_random(node_space, ev, 30, seed=s)) for s in range(20)]
    assert np.mean(f) < np.mean(r)
