"""Performance oracles standing in for model training.

An evaluator maps a design and a training budget to an `EvaluationRecord`.
`full=True` requests the expensive final evaluation; tabular and synthetic
evaluators answer from their stored full-score column and ignore the budget
number itself.
"""
from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .space import ConfigurationError, Design, DesignSpace

TIMEOUT_ENV = "DESIGNSEARCH_EVAL_TIMEOUT"
DEFAULT_TIMEOUT = 3600.0


class EvaluationError(RuntimeError):
    """The evaluator could not produce a score for a design."""


class DataError(EvaluationError):
    """Benchmark data is missing or inconsistent."""


@dataclass(frozen=True, eq=False)
class EvaluationRecord:
    score: float
    instance_correct: np.ndarray | None = None
    budget: float = 0.0
    wall_time: float = 0.0
    failed: bool = False
    extra: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvaluationRecord):
            return NotImplemented
        a, b = self.instance_correct, other.instance_correct
        same_bits = (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        return (self.score, self.budget, self.wall_time, self.failed) == (
            other.score, other.budget, other.wall_time, other.failed) and same_bits

    __hash__ = None

    @classmethod
    def failure(cls, budget: float, wall_time: float = 0.0) -> "EvaluationRecord":
        return cls(float("-inf"), None, budget, wall_time, failed=True)


class Evaluator:
    space: DesignSpace
    has_instances: bool = False

    def evaluate(self, design: Design, budget: float, full: bool = False) -> EvaluationRecord:
        raise NotImplementedError

    def evaluate_many(self, designs: Sequence[Design], budget: float, full: bool = False) -> list[EvaluationRecord]:
        return [self.evaluate(d, budget, full) for d in designs]

    def describe(self) -> str:
        return type(self).__name__


class TableEvaluator(Evaluator):
    """Lookup evaluator over per-design arrays indexed by design id."""

    def __init__(self, space: DesignSpace, warmup: np.ndarray, full: np.ndarray, instances: np.ndarray | None = None):
        self.space = space
        self.warmup = np.asarray(warmup, dtype=float)
        self.full = np.asarray(full, dtype=float)
        self.instances = None if instances is None else np.asarray(instances, dtype=np.uint8)
        self.has_instances = self.instances is not None and self.instances.shape[1] > 0

    def evaluate(self, design: Design, budget: float, full: bool = False) -> EvaluationRecord:
        i = design.id
        if not 0 <= i < len(self.warmup) or not np.isfinite(self.warmup[i]):
            raise DataError(f"no benchmark entry for design {i}")
        score = self.full[i] if full else self.warmup[i]
        bits = self.instances[i].copy() if self.has_instances else None
        return EvaluationRecord(float(score), bits, float(budget))


class TabularBenchmark(TableEvaluator):
    """Scores read from a CSV with columns design_id, warmup_score, full_score, instance_bits."""

    HEADER = ["design_id", "warmup_score", "full_score", "instance_bits"]

    def __init__(self, space, warmup, full, instances=None, source: str = ""):
        super().__init__(space, warmup, full, instances)
        self.source = source

    def describe(self) -> str:
        return f"tabular:{self.source}"

    @classmethod
    def load(cls, space: DesignSpace, path: str | Path, n_instances: int | None = None) -> "TabularBenchmark":
        n = space.size
        warm = np.full(n, np.nan)
        full = np.full(n, np.nan)
        bits: dict[int, str] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != cls.HEADER:
                raise DataError(f"{path}: header must be {','.join(cls.HEADER)}")
            for line_no, row in enumerate(reader, start=2):
                try:
                    i = int(row["design_id"])
                    w, f = float(row["warmup_score"]), float(row["full_score"])
                except (TypeError, ValueError):
                    raise DataError(f"{path}: line {line_no}: malformed row") from None
                if not 0 <= i < n:
                    raise DataError(f"{path}: line {line_no}: design_id {i} outside space of size {n}")
                if not (0.0 <= w <= 1.0 and 0.0 <= f <= 1.0):
                    raise DataError(f"{path}: line {line_no}: scores must lie in [0, 1]")
                warm[i], full[i] = w, f
                bits[i] = (row.get("instance_bits") or "").strip()
        missing = np.nonzero(np.isnan(warm))[0]
        if len(missing):
            raise DataError(f"{path}: missing {len(missing)} designs, first id {int(missing[0])}")
        widths = {len(b) for b in bits.values()}
        if len(widths) != 1:
            raise DataError(f"{path}: instance_bits must have one length for every design")
        width = widths.pop()
        instances = None
        if width:
            count = n_instances if n_instances is not None else 4 * width
            instances = np.stack([decode_bits(bits[i], count) for i in range(n)])
        return cls(space, warm, full, instances, source=str(path))

    def save(self, path: str | Path) -> None:
        write_tabular(path, self.warmup, self.full, self.instances)


def encode_bits(bits: np.ndarray | Sequence[int]) -> str:
    """Hex string, most significant bit first, zero-padded to whole nibbles."""
    bits = [int(b) for b in bits]
    if not bits:
        return ""
    pad = (-len(bits)) % 4
    bits = bits + [0] * pad
    return "".join(f"{int(''.join(map(str, bits[k:k + 4])), 2):x}" for k in range(0, len(bits), 4))


def decode_bits(text: str, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    if count > 4 * len(text):
        raise DataError(f"instance_bits {text!r} too short for {count} instances")
    try:
        value = bin(int(text, 16))[2:].zfill(4 * len(text))
    except ValueError:
        raise DataError(f"instance_bits {text!r} is not hex") from None
    return np.array([int(c) for c in value[:count]], dtype=np.uint8)


def write_tabular(path: str | Path, warmup, full, instances=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TabularBenchmark.HEADER)
        for i in range(len(warmup)):
            bits = encode_bits(instances[i]) if instances is not None else ""
            w.writerow([i, repr(float(warmup[i])), repr(float(full[i])), bits])


class SyntheticLandscape(TableEvaluator):
    """Seeded smooth score surface over a design space.

    Scores come from a random quadratic form over encoded design features,
    plus penalties tying large numerical settings to specific categorical
    choices, rescaled so neighbouring designs differ by `smoothness` on
    average.  Instance vectors threshold noisy linear views of the same
    features, so neighbouring designs get the same instances right.
    """

    def __init__(self, space, warmup, full, instances, seed: int, smoothness: float, stats: dict):
        super().__init__(space, warmup, full, instances)
        self.seed = seed
        self.smoothness = smoothness
        self.stats = stats

    def describe(self) -> str:
        return f"synthetic:{self.seed}:{self.smoothness}"

    @property
    def optimum(self) -> int:
        return int(np.argmax(self.warmup))


def _raw_surface(space: DesignSpace, rng: np.random.Generator) -> np.ndarray:
    x = space.features
    f = x.shape[1]
    linear = rng.normal(size=f)
    q = rng.normal(scale=1.0 / np.sqrt(f), size=(f, f)) * (rng.random((f, f)) < 0.3)
    q = 0.5 * (q + q.T)
    raw = x @ linear + np.einsum("ij,jk,ik->i", x, q, x)
    # large numerical settings hurt unless paired with one specific choice
    num = [j for j, d in enumerate(space.dimensions) if d.kind == "numerical"]
    cat = [j for j, d in enumerate(space.dimensions) if d.kind == "categorical"]
    if num and cat:
        offsets = np.cumsum([0] + [d.width for d in space.dimensions])
        for _ in range(min(3, len(num) * len(cat))):
            jn, jc = int(rng.choice(num)), int(rng.choice(cat))
            choice = int(rng.integers(space.dimensions[jc].size))
            level = x[:, offsets[jn]]
            paired = x[:, offsets[jc] + choice]
            raw -= rng.uniform(0.5, 1.5) * level * (1.0 - paired)
    return raw


def generate_synthetic(space: DesignSpace, seed: int, smoothness: float, n_instances: int = 64,
                       noise: float | None = None) -> SyntheticLandscape:
    """Build a landscape whose mean |score change| across graph edges is `smoothness`."""
    from .graph import build_graph

    if smoothness < 0:
        raise ConfigurationError("smoothness must be >= 0")
    rng = np.random.default_rng(seed)
    raw = _raw_surface(space, rng)
    edges = build_graph(space).edges
    raw_delta = float(np.mean(np.abs(raw[edges[:, 0]] - raw[edges[:, 1]]))) if len(edges) else 0.0
    scale = smoothness / raw_delta if raw_delta > 0 else 0.0
    warm = np.clip(0.5 + scale * (raw - raw.mean()), 0.0, 1.0)
    amp = 0.5 * smoothness if noise is None else noise
    full = np.clip(warm + rng.uniform(-amp, amp, size=len(warm)), 0.0, 1.0)

    x = space.features
    spread = warm.std()
    z = (warm - warm.mean()) / spread if spread > 0 else np.zeros_like(warm)
    views = x @ rng.normal(size=(x.shape[1], n_instances))
    views = (views - views.mean(axis=0)) / np.maximum(views.std(axis=0), 1e-12)
    offsets = rng.normal(size=n_instances)
    instances = (z[:, None] + 0.7 * views + offsets[None, :] > 0).astype(np.uint8)

    edge_delta = float(np.mean(np.abs(warm[edges[:, 0]] - warm[edges[:, 1]]))) if len(edges) else 0.0
    edge_ham = float(np.mean(instances[edges[:, 0]] != instances[edges[:, 1]])) if len(edges) else 0.0
    pairs = rng.integers(0, space.size, size=(min(20000, space.size * 4), 2))
    pair_ham = float(np.mean(instances[pairs[:, 0]] != instances[pairs[:, 1]]))
    stats = {
        "mean_edge_score_delta": edge_delta,
        "mean_edge_hamming": edge_ham,
        "hamming_bound": pair_ham,
        "optimum": int(np.argmax(warm)),
    }
    return SyntheticLandscape(space, warm, full, instances, seed, smoothness, stats)


class SubprocessEvaluator(Evaluator):
    """Runs an external command per design.

    The child receives one argument, the path of a JSON file holding
    ``{"design": {...}, "budget": b, "stage": "warmup"|"full"}``, and must
    print ``{"score": s, "instance_correct": [0, 1, ...]}`` on stdout
    (``instance_correct`` optional).  Extra keys are kept in `record.extra`.
    """

    def __init__(self, space: DesignSpace, command: Sequence[str] | str, timeout: float | None = None,
                 workers: int = 1, has_instances: bool = True):
        self.space = space
        self.command = command.split() if isinstance(command, str) else list(command)
        if not self.command:
            raise ConfigurationError("subprocess evaluator needs a command")
        if timeout is None:
            timeout = float(os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT))
        self.timeout = timeout
        self.workers = max(1, int(workers))
        self.has_instances = has_instances

    def describe(self) -> str:
        return "exec:" + " ".join(self.command)

    def evaluate(self, design: Design, budget: float, full: bool = False) -> EvaluationRecord:
        payload = {"design": design.assignment, "budget": budget, "stage": "full" if full else "warmup"}
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "request.json"
            path.write_text(json.dumps(payload))
            try:
                proc = subprocess.run(self.command + [str(path)], capture_output=True, text=True,
                                      timeout=self.timeout)
            except subprocess.TimeoutExpired:
                raise EvaluationError(f"evaluator timed out after {self.timeout}s on design {design.id}") from None
            except OSError as exc:
                raise EvaluationError(f"cannot run evaluator: {exc}") from None
        wall = time.perf_counter() - t0
        if proc.returncode != 0:
            raise EvaluationError(
                f"evaluator exited with {proc.returncode} on design {design.id}: {proc.stderr.strip()[:200]}"
            )
        return parse_response(proc.stdout, budget, wall)

    def evaluate_many(self, designs, budget, full=False):
        if self.workers == 1:
            return super().evaluate_many(designs, budget, full)
        with ThreadPoolExecutor(self.workers) as pool:
            futures = [pool.submit(self.evaluate, d, budget, full) for d in designs]
            return [f.result() for f in futures]


def parse_response(text: str, budget: float = 0.0, wall_time: float = 0.0) -> EvaluationRecord:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"malformed evaluator output: {exc.msg}") from None
    if not isinstance(data, dict) or "score" not in data:
        raise EvaluationError("evaluator output must be an object with a 'score' field")
    try:
        score = float(data["score"])
    except (TypeError, ValueError):
        raise EvaluationError("evaluator 'score' must be a number") from None
    bits = data.get("instance_correct")
    if bits is not None:
        if not isinstance(bits, list) or any(b not in (0, 1) for b in bits):
            raise EvaluationError("'instance_correct' must be a list of 0/1")
        bits = np.asarray(bits, dtype=np.uint8)
    extra = {k: v for k, v in data.items() if k not in ("score", "instance_correct")}
    return EvaluationRecord(score, bits, float(budget), wall_time, extra=extra)


class CountingEvaluator(Evaluator):
    """Wraps another evaluator and counts warm-up and full calls."""

    def __init__(self, inner: Evaluator):
        self.inner = inner
        self.space = inner.space
        self.has_instances = inner.has_instances
        self.warmup_calls = 0
        self.full_calls = 0
        self.calls: list[tuple[int, bool]] = []

    def evaluate(self, design, budget, full=False):
        if full:
            self.full_calls += 1
        else:
            self.warmup_calls += 1
        self.calls.append((design.id, full))
        return self.inner.evaluate(design, budget, full)

    def describe(self) -> str:
        return self.inner.describe()


def parse_evaluator_spec(spec: str, space: DesignSpace) -> Evaluator:
    """Build an evaluator from `tabular:PATH`, `synthetic:SEED:SMOOTHNESS` or `exec:COMMAND`."""
    kind, _, rest = spec.partition(":")
    if kind == "tabular" and rest:
        return TabularBenchmark.load(space, rest)
    if kind == "synthetic":
        parts = rest.split(":")
        try:
            seed = int(parts[0])
            smooth = float(parts[1]) if len(parts) > 1 and parts[1] else 0.02
        except (ValueError, IndexError):
            raise ConfigurationError(f"--evaluator {spec!r}: expected synthetic:SEED:SMOOTHNESS") from None
        return generate_synthetic(space, seed, smooth)
    if kind == "exec" and rest:
        return SubprocessEvaluator(space, rest)
    raise ConfigurationError(f"--evaluator {spec!r}: expected tabular:PATH, synthetic:SEED:SMOOTHNESS or exec:COMMAND")


def echo_main(argv: list[str] | None = None) -> int:
    """Reference child: scores a design by hashing it and echoes it back."""
    argv = sys.argv[1:] if argv is None else argv
    request = json.loads(Path(argv[0]).read_text())
    design = request["design"]
    digest = sum(ord(c) for c in json.dumps(design, sort_keys=True))
    print(json.dumps({"score": (digest % 1000) / 1000.0, "design": design, "budget": request.get("budget")}))
    return 0


if __name__ == "__main__":
    raise SystemExit(echo_main())
