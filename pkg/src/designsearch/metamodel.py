"""Performance predictor over a design subgraph.

Two channels feed a small MLP head:

* message passing over design features and edge relation one-hots,
* a linear projection of per-instance correctness rows that were diffused
  from explored designs to the rest of the subgraph by label propagation.

Gradients are derived by hand (reverse mode through each layer) and
checked against finite differences in the test-suite.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .graph import DesignGraph, DesignSubgraph, neighbor_arrays
from .space import ConfigurationError, Design, DesignSpace, DomainError

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


class NumericError(ArithmeticError):
    """A non-finite value appeared inside the forward pass."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetaModelConfig:
    hidden_dim: int = 32
    mp_layers: int = 3
    lp_layers: int = 3
    alpha: float = 0.8
    rank_weight: float = 1.0
    rank_temperature: float = 0.1
    instance_sample_size: int = 32
    max_train_epochs: int = 100
    patience: int = 10
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    head: str = "mlp"

    def __post_init__(self):
        checks = [
            (self.hidden_dim >= 1, "hidden_dim must be positive"),
            (self.mp_layers >= 0, "mp_layers must be >= 0"),
            (self.lp_layers >= 0, "lp_layers must be >= 0"),
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (self.rank_weight >= 0, "rank_weight must be >= 0"),
            (self.rank_temperature > 0, "rank_temperature must be > 0"),
            (self.instance_sample_size >= 1, "instance_sample_size must be >= 1"),
            (self.max_train_epochs >= 0, "max_train_epochs must be >= 0"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.optimizer in ("gd", "adam"), "optimizer must be 'gd' or 'adam'"),
            (self.head in ("mlp", "linear"), "head must be 'mlp' or 'linear'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    def to_dict(self) -> dict:
        return asdict(self)


# -- relation encoder -------------------------------------------------------

def edge_label(space: DesignSpace, u: Design | int, v: Design | int) -> int:
    """Index into `space.coordinates` of the coordinate where u and v differ."""
    iu = u.id if isinstance(u, Design) else int(u)
    iv = v.id if isinstance(v, Design) else int(v)
    if space.distance(iu, iv) != 1:
        raise DomainError(f"designs {iu} and {iv} are not at distance 1")
    _, tgt, lab = neighbor_arrays(space, np.array([iu]))
    return int(lab[np.nonzero(tgt == iv)[0][0]])


def encode_edge(space: DesignSpace, u: Design | int, v: Design | int) -> np.ndarray:
    out = np.zeros(len(space.coordinates))
    out[edge_label(space, u, v)] = 1.0
    return out


# -- task-specific channel --------------------------------------------------

def instance_entropy(matrix: np.ndarray) -> np.ndarray:
    """Binary entropy (nats) of each instance column over anchor rows."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1:
        raise DomainError("instance matrix needs at least one anchor row")
    p = m.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    return np.nan_to_num(h, nan=0.0)


def instance_probabilities(matrix: np.ndarray) -> np.ndarray:
    h = instance_entropy(matrix)
    e = np.exp(h - h.max())
    return e / e.sum()


def select_instances(matrix: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Sample `m` informative instance columns, favouring high-entropy ones."""
    probs = instance_probabilities(matrix)
    n = len(probs)
    if m >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False, p=probs))


def normalized_adjacency(adj: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 A D^-1/2 with zero rows/columns for isolated nodes."""
    adj = sp.csr_matrix(adj, dtype=float)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    d = sp.diags(dinv)
    return (d @ adj @ d).tocsr()


def label_propagate(graph: DesignSubgraph | DesignGraph | sp.spmatrix, y0: np.ndarray, alpha: float, k: int) -> np.ndarray:
    """Apply Y <- alpha * S Y + (1 - alpha) * Y, `k` times."""
    if isinstance(graph, DesignSubgraph):
        graph = graph.graph
    adj = graph.adjacency() if isinstance(graph, DesignGraph) else graph
    y = np.asarray(y0, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if adj.shape[0] != y.shape[0]:
        raise DomainError(f"{y.shape[0]} rows for a graph of {adj.shape[0]} nodes")
    if not 0.0 <= alpha < 1.0:
        raise DomainError("alpha must lie in [0, 1)")
    s = normalized_adjacency(adj)
    for _ in range(k):
        y = alpha * (s @ y) + (1 - alpha) * y
    return y[:, 0] if squeeze else y


# -- network ----------------------------------------------------------------

@dataclass
class ModelInputs:
    """Everything the forward pass reads, in subgraph node order."""

    features: np.ndarray            # (n, F)
    mean_adj: sp.csr_matrix         # row-normalised adjacency, zero rows when isolated
    mean_edge: np.ndarray           # (n, L) mean relation one-hot over neighbours
    channel: np.ndarray             # (n, m) propagated instance rows

    def __post_init__(self):
        # constant across epochs: first-layer neighbour mean and the transpose used in backprop
        self.mean_adj_t = self.mean_adj.T.tocsr()
        self.feature_mean = self.mean_adj @ self.features

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @classmethod
    def build(cls, graph: DesignGraph, channel: np.ndarray | None = None, width: int = 0) -> "ModelInputs":
        space = graph.space
        adj = graph.adjacency()
        n = graph.n_nodes
        deg = np.diff(adj.indptr).astype(float)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        mean_adj = (sp.diags(inv) @ adj).tocsr()
        n_labels = len(space.coordinates)
        lab = graph.label_matrix().tocoo()
        counts = np.zeros((n, n_labels))
        np.add.at(counts, (lab.row, lab.data.astype(np.int64) - 1), 1.0)
        mean_edge = counts * inv[:, None]
        if channel is None:
            channel = np.zeros((n, width))
        return cls(space.features[graph.nodes], mean_adj, mean_edge, np.asarray(channel, dtype=float))

    def permuted(self, perm: np.ndarray) -> "ModelInputs":
        return ModelInputs(
            self.features[perm],
            self.mean_adj[perm][:, perm].tocsr(),
            self.mean_edge[perm],
            self.channel[perm],
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(
    config: MetaModelConfig,
    feature_width: int,
    n_labels: int,
    channel_width: int,
    rng: np.random.Generator,
    use_graph: bool = True,
) -> Params:
    """Seeded Glorot-uniform weights, zero biases.

    With `use_graph=False` the head reads design features directly and the
    message-passing and projection blocks are absent.
    """
    h = config.hidden_dim
    p: Params = {}
    if use_graph:
        width = feature_width
        for layer in range(config.mp_layers):
            p[f"mp{layer}.self"] = _glorot(rng, width, h)
            p[f"mp{layer}.nbr"] = _glorot(rng, width, h)
            p[f"mp{layer}.edge"] = _glorot(rng, n_labels, h)
            p[f"mp{layer}.bias"] = np.zeros(h)
            width = h
        p["proj.w"] = _glorot(rng, max(channel_width, 1), h)[:channel_width]
        p["proj.b"] = np.zeros(h)
        head_in = width + h
    else:
        head_in = feature_width
    if config.head == "mlp":
        p["head1.w"] = _glorot(rng, head_in, h)
        p["head1.b"] = np.zeros(h)
        p["head2.w"] = _glorot(rng, h, 1)
    else:
        p["head2.w"] = _glorot(rng, head_in, 1)
    p["head2.b"] = np.zeros(1)
    return p


def uses_graph(params: Params) -> bool:
    return "proj.b" in params


def _mp_layer_count(params: Params) -> int:
    return sum(1 for k in params if k.endswith(".self"))


def _check(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


@dataclass
class _Plan:
    """Rows each message-passing layer must produce to predict `rows[-1]`.

    Layer l outputs rows[l]; its inputs live on rows[l-1] (all nodes for the
    first layer), which covers rows[l] and their neighbours.  `adj[l]` is the
    mean-aggregation matrix restricted to those rows and columns and `self_pos[l]`
    locates rows[l] inside rows[l-1].
    """

    rows: list[np.ndarray]
    adj: list[sp.csr_matrix]
    adj_t: list[sp.csr_matrix]
    self_pos: list[np.ndarray]
    out: np.ndarray


def make_plan(inputs: ModelInputs, layers: int, targets: np.ndarray | None = None) -> _Plan:
    """Row plan for predicting `targets` (all nodes when None) through `layers` rounds."""
    n = inputs.n
    if targets is None:
        every = np.arange(n)
        return _Plan([every] * layers, [inputs.mean_adj] * layers, [inputs.mean_adj_t] * layers,
                     [every] * layers, every)
    targets = np.asarray(targets, dtype=np.int64)
    need = np.zeros(n, dtype=bool)
    need[targets] = True
    masks = [need] if layers else []
    for _ in range(layers - 1):
        m = masks[0]
        masks.insert(0, m | (inputs.mean_adj_t @ m.astype(float) > 0))
    rows = [np.nonzero(m)[0] for m in masks]
    adj, adj_t, self_pos = [], [], []
    for l, r in enumerate(rows):
        prev = rows[l - 1] if l else np.arange(n)
        block = inputs.mean_adj[r][:, prev].tocsr()
        adj.append(block)
        adj_t.append(block.T.tocsr())
        self_pos.append(np.searchsorted(prev, r))
    last = rows[-1] if layers else np.arange(n)
    return _Plan(rows, adj, adj_t, self_pos, np.searchsorted(last, targets))


def _forward(params: Params, inputs: ModelInputs, plan: _Plan | None = None) -> tuple[np.ndarray, dict]:
    cache: dict = {}
    if plan is None:
        plan = make_plan(inputs, _mp_layer_count(params) if uses_graph(params) else 0)
    if uses_graph(params):
        h = inputs.features
        hs, zs, aggs = [], [], []
        for layer in range(_mp_layer_count(params)):
            rows = plan.rows[layer]
            if layer == 0:
                agg = inputs.feature_mean[rows]
            else:
                agg = plan.adj[layer] @ h
            z = (
                h[plan.self_pos[layer]] @ params[f"mp{layer}.self"]
                + agg @ params[f"mp{layer}.nbr"]
                + inputs.mean_edge[rows] @ params[f"mp{layer}.edge"]
                + params[f"mp{layer}.bias"]
            )
            _check(z, f"message-passing layer {layer}")
            hs.append(h); aggs.append(agg); zs.append(z)
            h = np.maximum(z, 0.0)
        h = h[plan.out]
        channel = inputs.channel[plan.rows[-1][plan.out]] if plan.rows else inputs.channel[plan.out]
        t = channel @ params["proj.w"] + params["proj.b"]
        _check(t, "projection layer")
        head_in = np.concatenate([h, t], axis=1)
        cache.update(hs=hs, zs=zs, aggs=aggs, width=h.shape[1], channel=channel)
    else:
        head_in = inputs.features[plan.out]
    cache["head_in"] = head_in
    cache["plan"] = plan
    if "head1.w" in params:
        z1 = head_in @ params["head1.w"] + params["head1.b"]
        _check(z1, "head layer 0")
        u = np.maximum(z1, 0.0)
        cache.update(z1=z1, u=u)
    else:
        u = head_in
    y = (u @ params["head2.w"] + params["head2.b"])[:, 0]
    _check(y, "head output layer")
    cache["last"] = u
    return y, cache


def forward(params: Params, inputs: ModelInputs) -> np.ndarray:
    """Predicted score for every node of the subgraph."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(params, inputs)[0]


def _backward(params: Params, inputs: ModelInputs, cache: dict, dy: np.ndarray) -> Params:
    """Gradients for the rows predicted in `cache`, given d loss / d prediction `dy`."""
    g: Params = {}
    dy = dy[:, None]
    u = cache["last"]
    g["head2.w"] = u.T @ dy
    g["head2.b"] = dy.sum(axis=0)
    du = dy @ params["head2.w"].T
    if "head1.w" in params:
        dz1 = du * (cache["z1"] > 0)
        g["head1.w"] = cache["head_in"].T @ dz1
        g["head1.b"] = dz1.sum(axis=0)
        d_in = dz1 @ params["head1.w"].T
    else:
        d_in = du
    if not uses_graph(params):
        return g
    plan: _Plan = cache["plan"]
    width = cache["width"]
    dh_out, dt = d_in[:, :width], d_in[:, width:]
    g["proj.w"] = cache["channel"].T @ dt
    g["proj.b"] = dt.sum(axis=0)
    layers = _mp_layer_count(params)
    if not layers:
        return g
    dh = np.zeros((len(plan.rows[-1]), width))
    np.add.at(dh, plan.out, dh_out)
    for layer in reversed(range(layers)):
        rows = plan.rows[layer]
        dz = dh * (cache["zs"][layer] > 0)
        h_prev, agg = cache["hs"][layer], cache["aggs"][layer]
        g[f"mp{layer}.self"] = h_prev[plan.self_pos[layer]].T @ dz
        g[f"mp{layer}.nbr"] = agg.T @ dz
        g[f"mp{layer}.edge"] = inputs.mean_edge[rows].T @ dz
        g[f"mp{layer}.bias"] = dz.sum(axis=0)
        if layer:
            dh = plan.adj_t[layer] @ (dz @ params[f"mp{layer}.nbr"].T)
            dh[plan.self_pos[layer]] += dz @ params[f"mp{layer}.self"].T
    return g


# -- objective --------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_and_grad(pred: np.ndarray, target: np.ndarray, rank_weight: float, temperature: float) -> tuple[float, np.ndarray]:
    """Squared error plus signed pairwise sigmoid rank term, with d/d pred.

    Pairs i < j with equal targets are skipped, as is the diagonal.
    """
    if temperature <= 0:
        raise ConfigurationError("rank temperature must be > 0")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.ndim != 1 or len(pred) < 1:
        raise DomainError("predictions and targets must be equal-length vectors")
    resid = pred - target
    value = float(resid @ resid)
    grad = 2.0 * resid
    if rank_weight and len(pred) > 1:
        i, j = np.triu_indices(len(pred), k=1)
        keep = target[i] != target[j]
        i, j = i[keep], j[keep]
        sign = np.where(target[i] > target[j], -1.0, 1.0)
        s = _sigmoid((pred[i] - pred[j]) / temperature)
        value += rank_weight * float(np.sum(sign * s))
        coef = rank_weight * sign * s * (1 - s) / temperature
        np.add.at(grad, i, coef)
        np.add.at(grad, j, -coef)
    return value, grad


def loss(pred: np.ndarray, target: np.ndarray, rank_weight: float, temperature: float) -> float:
    return loss_and_grad(pred, target, rank_weight, temperature)[0]


def objective(params: Params, inputs: ModelInputs, train_idx: np.ndarray, targets: np.ndarray,
              config: MetaModelConfig, plan: _Plan | None = None) -> tuple[float, Params]:
    """Training loss over `train_idx` rows and its gradient w.r.t. every parameter.

    Only rows that can influence the training predictions are computed.
    """
    if plan is None:
        layers = _mp_layer_count(params) if uses_graph(params) else 0
        plan = make_plan(inputs, layers, train_idx)
    with np.errstate(over="ignore", invalid="ignore"):
        y, cache = _forward(params, inputs, plan)
        value, dpred = loss_and_grad(y, targets, config.rank_weight, config.rank_temperature)
        return value, _backward(params, inputs, cache, dpred)


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    loss: float
    epochs: int
    restarted: bool = False
    history: list[float] = field(default_factory=list)


def _descend(params: Params, inputs: ModelInputs, train_idx, targets, config) -> TrainResult:
    params = {k: v.copy() for k, v in params.items()}
    best = {k: v.copy() for k, v in params.items()}
    best_loss = np.inf
    stale = 0
    history: list[float] = []
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    plan = make_plan(inputs, _mp_layer_count(params) if uses_graph(params) else 0, train_idx)
    epoch = 0
    for epoch in range(1, config.max_train_epochs + 1):
        value, grads = objective(params, inputs, train_idx, targets, config, plan)
        if not np.isfinite(value):
            raise NumericError(f"loss became non-finite at epoch {epoch}")
        history.append(value)
        if value < best_loss - 1e-4 * abs(best_loss) or not np.isfinite(best_loss):
            stale = 0
        else:
            stale += 1
        if value < best_loss:
            best_loss = value
            best = {k: a.copy() for k, a in params.items()}
        if stale >= config.patience:
            break
        lr = config.learning_rate
        if config.optimizer == "adam":
            b1, b2 = 0.9, 0.999
            for k, gk in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * gk
                v2[k] = b2 * v2[k] + (1 - b2) * gk * gk
                mhat = m[k] / (1 - b1 ** epoch)
                vhat = v2[k] / (1 - b2 ** epoch)
                params[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
        else:
            for k, gk in grads.items():
                params[k] -= lr * gk
    if not history:
        best_loss, _ = objective(params, inputs, train_idx, targets, config, plan)
    return TrainResult(best, float(best_loss), epoch, history=history)


def train(params: Params, config: MetaModelConfig, inputs: ModelInputs, train_idx: np.ndarray,
          targets: np.ndarray, rng: np.random.Generator, reinit=None) -> TrainResult:
    """Gradient descent on the training objective; returns the best-loss parameters.

    Stops after `max_train_epochs` or once the loss has not improved by a
    relative 1e-4 for `patience` epochs.  On divergence the run restarts once
    from fresh weights drawn through `reinit(rng)` (or a re-draw matching the
    current shapes), then gives up.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    targets = np.asarray(targets, dtype=float)
    if len(train_idx) < 2 and config.max_train_epochs > 0:
        raise DomainError("training needs at least two explored designs")
    try:
        return _descend(params, inputs, train_idx, targets, config)
    except NumericError as exc:
        log.warning("meta-model training diverged (%s); restarting from fresh weights", exc)
    fresh = reinit(rng) if reinit is not None else _redraw(params, rng)
    try:
        result = _descend(fresh, inputs, train_idx, targets, config)
    except NumericError as exc:
        raise TrainingDiverged(str(exc)) from exc
    result.restarted = True
    return result


def _redraw(params: Params, rng: np.random.Generator) -> Params:
    out = {}
    for k, v in params.items():
        if v.ndim == 2:
            out[k] = _glorot(rng, max(v.shape[0], 1), v.shape[1])[: v.shape[0]]
        else:
            out[k] = np.zeros_like(v)
    return out


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Params, config: MetaModelConfig) -> None:
    payload = {
        "config": config.to_dict(),
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[Params, MetaModelConfig]:
    payload = json.loads(Path(path).read_text())
    params = {
        k: np.asarray(v["values"], dtype=float).reshape(v["shape"]) for k, v in payload["params"].items()
    }
    return params, MetaModelConfig(**payload["config"])


def params_from_mapping(data: Mapping[str, np.ndarray]) -> Params:
    return {k: np.asarray(v, dtype=float) for k, v in data.items()}
