"""Reference search strategies sharing the result schema of the guided search."""
from __future__ import annotations

import math

import numpy as np

from .evaluators import Evaluator
from .graph import LazyDesignGraph
from .search import SearchResult, _Ledger, default_topk, finalize
from .space import ConfigurationError, DesignSpace


def _config(strategy: str, space: DesignSpace, evaluator: Evaluator, **params) -> dict:
    return {
        "strategy": strategy,
        "space": space.to_dict(),
        "evaluator": evaluator.describe(),
        "search": params,
    }


def run_random(space: DesignSpace, evaluator: Evaluator, k: int = 30, warmup_budget: float = 50.0,
               full_budget: float = 200.0, seed: int = 0) -> SearchResult:
    """K distinct designs drawn uniformly, then the shared top-k full-training finale."""
    if not 1 <= k <= space.size:
        raise ConfigurationError(f"budget K={k} must lie in [1, {space.size}]")
    rng = np.random.default_rng(seed)
    ledger = _Ledger(space, evaluator, warmup_budget, k)
    picks = rng.choice(space.size, size=k, replace=False)
    for step, i in enumerate(picks):
        ledger.explore(int(i), candidates=space.size - step)
    cfg = _config("random", space, evaluator, budget=k, warmup_budget=warmup_budget,
                  full_budget=full_budget, seed=seed)
    return finalize("random", ledger, evaluator, full_budget, default_topk(k), cfg)


def sa_accept(delta: float, temperature: float, u: float) -> bool:
    """Metropolis rule for maximisation: always take non-worsening moves."""
    if delta >= 0:
        return True
    if temperature <= 0:
        return False
    return u < math.exp(delta / temperature)


def run_sa(space: DesignSpace, evaluator: Evaluator, k: int = 30, warmup_budget: float = 50.0,
           full_budget: float = 200.0, seed: int = 0, t0: float = 0.05, cooling: float = 0.9,
           max_stall: int = 1000) -> SearchResult:
    """Simulated annealing over design-graph neighbours with exactly K evaluations.

    Proposals that revisit an evaluated design reuse its score without a new
    evaluation.  After `max_stall` such proposals in a row the walk restarts
    from a uniformly drawn unevaluated design.
    """
    if t0 <= 0 or not 0 < cooling < 1:
        raise ConfigurationError("simulated annealing needs t0 > 0 and 0 < cooling < 1")
    if not 1 <= k <= space.size:
        raise ConfigurationError(f"budget K={k} must lie in [1, {space.size}]")
    rng = np.random.default_rng(seed)
    graph = LazyDesignGraph(space)
    ledger = _Ledger(space, evaluator, warmup_budget, k)

    def score(i: int) -> float:
        return ledger.records[i].score

    current = int(rng.integers(space.size))
    ledger.explore(current, candidates=space.size)
    temperature = t0
    stall = 0
    while len(ledger.ids) < k:
        nbrs = graph.neighbors(current)
        proposal = int(nbrs[rng.integers(len(nbrs))]) if len(nbrs) else current
        if proposal not in ledger.records:
            ledger.explore(proposal, candidates=len(nbrs))
            stall = 0
        else:
            stall += 1
            if stall >= max_stall:
                unseen = np.setdiff1d(np.arange(space.size), np.array(ledger.ids))
                current = int(unseen[rng.integers(len(unseen))])
                ledger.explore(current, candidates=len(unseen))
                stall = 0
                continue
        delta = score(proposal) - score(current)
        if not np.isfinite(delta):
            delta = -np.inf if not np.isfinite(score(proposal)) else np.inf
        if sa_accept(delta, temperature, rng.random()):
            current = proposal
        temperature *= cooling
    cfg = _config("sa", space, evaluator, budget=k, warmup_budget=warmup_budget, full_budget=full_budget,
                  seed=seed, t0=t0, cooling=cooling)
    return finalize("sa", ledger, evaluator, full_budget, default_topk(k), cfg)


def bruteforce_size(space: DesignSpace, fraction: float) -> int:
    return math.ceil(fraction * space.size)


def run_bruteforce(space: DesignSpace, evaluator: Evaluator, fraction: float = 0.05, warmup_budget: float = 50.0,
                   full_budget: float = 200.0, seed: int = 0) -> SearchResult:
    """Evaluate a uniform sample of ceil(fraction * |space|) designs; fully train only the best."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("fraction must lie in (0, 1]")
    n = bruteforce_size(space, fraction)
    rng = np.random.default_rng(seed)
    ledger = _Ledger(space, evaluator, warmup_budget, n)
    for step, i in enumerate(rng.choice(space.size, size=n, replace=False)):
        ledger.explore(int(i), candidates=space.size - step)
    cfg = _config("bruteforce", space, evaluator, fraction=fraction, budget=n, warmup_budget=warmup_budget,
                  full_budget=full_budget, seed=seed)
    return finalize("bruteforce", ledger, evaluator, full_budget, 1, cfg)
