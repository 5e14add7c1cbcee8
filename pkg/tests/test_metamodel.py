from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from designsearch import metamodel as mm
from designsearch.graph import DesignGraph, build_graph, induced_graph, multi_hop_neighbors
from designsearch.space import ConfigurationError, DomainError


def random_graph(n, p, rng):
    a = (rng.random((n, n)) < p).astype(float)
    a = np.triu(a, 1)
    return a + a.T


def dense_lp(a, y0, alpha, k):
    deg = a.sum(axis=1)
    dinv = np.array([1 / math.sqrt(d) if d > 0 else 0.0 for d in deg])
    s = dinv[:, None] * a * dinv[None, :]
    return np.linalg.matrix_power(alpha * s + (1 - alpha) * np.eye(len(a)), k) @ y0


# -- relation encoder -------------------------------------------------------

def test_encode_edge_examples(node_space, graph_space):
    base = dict(dropout=0.0, pre_layers=1, mp_layers=8, post_layers=1, connectivity="stack",
                activation="relu", batch_norm=True, aggregation="mean")
    u = node_space.lookup(base)
    v = node_space.lookup({**base, "dropout": 0.3})
    e = mm.encode_edge(node_space, u, v)
    assert e.sum() == 1 and e[node_space.coordinates.index("dropout")] == 1

    off = graph_space.lookup({**base, "pool_flag": False})
    on = graph_space.lookup({**base, "pool_flag": True, "pool_type": "sag", "pool_loop": 2})
    e = mm.encode_edge(graph_space, off, on)
    assert e[graph_space.coordinates.index("pooling")] == 1 and e.sum() == 1

    with pytest.raises(DomainError):
        mm.encode_edge(node_space, u, u)


# -- instance selection -----------------------------------------------------

def test_entropy_examples():
    m = np.array([[1, 1], [1, 0], [1, 1], [1, 0]])
    h = mm.instance_entropy(m)
    assert h[0] == 0.0
    assert h[1] == pytest.approx(math.log(2))
    assert mm.instance_probabilities(m) == pytest.approx([1 / 3, 2 / 3], abs=1e-3)


def test_identical_anchor_rows_give_uniform_probabilities():
    row = np.array([1, 0, 1, 1, 0])
    p = mm.instance_probabilities(np.stack([row, row, row]))
    assert p == pytest.approx(np.full(5, 0.2))


def test_select_instances_determinism_and_overflow():
    rng_m = np.random.default_rng(0)
    mat = rng_m.integers(0, 2, size=(6, 50))
    a = mm.select_instances(mat, 10, np.random.default_rng(3))
    b = mm.select_instances(mat, 10, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == 10
    assert np.array_equal(mm.select_instances(mat, 80, np.random.default_rng(3)), np.arange(50))


def test_select_instances_empirical_frequency():
    mat = np.array([[1, 1], [1, 0], [1, 1], [1, 0]])
    rng = np.random.default_rng(0)
    hits = sum(int(mm.select_instances(mat, 1, rng)[0] == 1) for _ in range(6000))
    assert hits / 6000 == pytest.approx(2 / 3, abs=0.02)


# -- label propagation ------------------------------------------------------

def test_lp_two_node_example():
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert mm.label_propagate(a, np.array([[1.0], [0.0]]), 0.5, 1) == pytest.approx(np.array([[0.5], [0.5]]))


def test_lp_identity_at_alpha_zero():
    rng = np.random.default_rng(0)
    a = sp.csr_matrix(random_graph(8, 0.4, rng))
    y = rng.random((8, 3))
    assert np.allclose(mm.label_propagate(a, y, 0.0, 3), y)


def test_lp_isolated_node_decays():
    a = sp.csr_matrix(np.zeros((3, 3)))
    y = mm.label_propagate(a, np.array([[1.0], [2.0], [0.0]]), 0.8, 2)
    assert y[:, 0] == pytest.approx([0.04, 0.08, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.floats(0.0, 1.0), st.floats(0.01, 0.99), st.integers(0, 5), st.integers(0, 10**6))
def test_lp_matches_dense_oracle(n, p, alpha, k, seed):
    rng = np.random.default_rng(seed)
    a = random_graph(n, p, rng)
    y0 = rng.random((n, 3))
    assert np.allclose(mm.label_propagate(sp.csr_matrix(a), y0, alpha, k), dense_lp(a, y0, alpha, k), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_lp_is_linear(seed, ca, cb):
    rng = np.random.default_rng(seed)
    a = sp.csr_matrix(random_graph(12, 0.3, rng))
    y, z = rng.random((12, 2)), rng.random((12, 2))
    lhs = mm.label_propagate(a, ca * y + cb * z, 0.7, 3)
    rhs = ca * mm.label_propagate(a, y, 0.7, 3) + cb * mm.label_propagate(a, z, 0.7, 3)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_lp_shape_mismatch():
    with pytest.raises(DomainError):
        mm.label_propagate(sp.csr_matrix(np.zeros((3, 3))), np.zeros((4, 1)), 0.5, 1)


# -- loss -------------------------------------------------------------------

def ref_loss(pred, target, lam, tau):
    total = sum((p - t) ** 2 for p, t in zip(pred, target))
    for i in range(len(pred)):
        for j in range(i + 1, len(pred)):
            if target[i] == target[j]:
                continue
            sign = -1.0 if target[i] > target[j] else 1.0
            total += lam * sign / (1 + math.exp(-(pred[i] - pred[j]) / tau))
    return total


def test_loss_examples():
    y = np.array([0.2, 0.7, 1.0])
    assert mm.loss(y, y, 0.0, 0.1) == 0.0
    c = 0.3
    assert mm.loss(np.array([c, c]), np.array([1.0, 0.0]), 1.0, 1.0) == pytest.approx((c - 1) ** 2 + c ** 2 - 0.5)
    with pytest.raises(ConfigurationError):
        mm.loss(y, y, 1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6), st.floats(0, 3), st.floats(0.05, 2))
def test_loss_matches_double_loop(n, seed, lam, tau):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=n)
    target = rng.integers(0, 4, size=n) / 3.0  # ties on purpose
    assert mm.loss(pred, target, lam, tau) == pytest.approx(ref_loss(pred, target, lam, tau), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10**6))
def test_rank_term_prefers_order_preserving(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.permutation(n) / n
    up = 2 * y + 0.1
    down = -up
    rank = lambda p: mm.loss(p, y, 1.0, 0.5) - float(((p - y) ** 2).sum())
    assert rank(up) < rank(down)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10**6))
def test_loss_gradient_matches_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=n), rng.random(n)
    _, g = mm.loss_and_grad(pred, target, 1.3, 0.4)
    eps = 1e-6
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        fd = (mm.loss(pred + e, target, 1.3, 0.4) - mm.loss(pred - e, target, 1.3, 0.4)) / (2 * eps)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


# -- forward and gradients --------------------------------------------------

@pytest.fixture(scope="module")
def small_problem(pool_toy):
    g = build_graph(pool_toy)
    sub = induced_graph(g, multi_hop_neighbors(g, [3], 2) | {3})
    rng = np.random.default_rng(5)
    channel = rng.random((sub.n_nodes, 4))
    return sub, mm.ModelInputs.build(sub, channel)


@pytest.mark.parametrize("head", ["mlp", "linear"])
@pytest.mark.parametrize("use_graph", [True, False])
def test_parameter_gradients_match_finite_differences(small_problem, head, use_graph, pool_toy):
    sub, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=5, mp_layers=2, head=head, rank_temperature=0.5)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4,
                            np.random.default_rng(11), use_graph)
    # push biases off zero so ReLU kinks are not hit exactly
    for k in params:
        if k.endswith("b") or k.endswith("bias"):
            params[k] = params[k] + 0.05
    idx = np.arange(0, sub.n_nodes, 2)
    targets = np.random.default_rng(12).random(len(idx))
    _, grads = mm.objective(params, inputs, idx, targets, cfg)
    eps = 1e-5
    worst = 0.0
    for k, w in params.items():
        assert grads[k].shape == w.shape
        for flat in range(w.size):
            orig = w.flat[flat]
            w.flat[flat] = orig + eps
            up, _ = mm.objective(params, inputs, idx, targets, cfg)
            w.flat[flat] = orig - eps
            dn, _ = mm.objective(params, inputs, idx, targets, cfg)
            w.flat[flat] = orig
            fd = (up - dn) / (2 * eps)
            an = grads[k].flat[flat]
            worst = max(worst, abs(an - fd) / max(1e-6, abs(an) + abs(fd)))
    assert worst <= 1e-4


def test_restricted_objective_matches_full_forward(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=6)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(8))
    idx = np.array([5, 0, 3])
    targets = np.array([0.1, 0.9, 0.4])
    value, _ = mm.objective(params, inputs, idx, targets, cfg)
    full = mm.forward(params, inputs)[idx]
    assert value == pytest.approx(mm.loss(full, targets, cfg.rank_weight, cfg.rank_temperature), rel=1e-12)


def test_zero_params_give_constant_output(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=4)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(0))
    params = {k: np.zeros_like(v) for k, v in params.items()}
    params["head2.b"][:] = 0.37
    assert np.allclose(mm.forward(params, inputs), 0.37)


def loop_forward(params, feats, nbrs, edge_onehots, channel, layers):
    """Node-by-node forward written from the layer definition."""
    h = [np.array(f, dtype=float) for f in feats]
    for layer in range(layers):
        ws, wn, we, b = (params[f"mp{layer}.{k}"] for k in ("self", "nbr", "edge", "bias"))
        new = []
        for v in range(len(h)):
            z = h[v] @ ws + b
            if nbrs[v]:
                msg = sum(np.concatenate([h[u], edge_onehots[(v, u)]]) @ np.vstack([wn, we]) for u in nbrs[v])
                z = z + msg / len(nbrs[v])
            new.append(np.maximum(z, 0))
        h = new
    out = []
    for v in range(len(h)):
        t = channel[v] @ params["proj.w"] + params["proj.b"]
        x = np.concatenate([h[v], t])
        u = np.maximum(x @ params["head1.w"] + params["head1.b"], 0)
        out.append(float(u @ params["head2.w"][:, 0] + params["head2.b"][0]))
    return np.array(out)


def test_three_node_path_forward_trace(toy):
    # lr=0.01 relu - lr=0.01 tanh - lr=0.1 tanh is a path in the toy graph
    ids = [toy.lookup(a).id for a in ({"lr": 0.01, "act": "relu"}, {"lr": 0.01, "act": "tanh"},
                                      {"lr": 0.1, "act": "tanh"})]
    sub = induced_graph(build_graph(toy), ids)
    assert sub.n_edges == 2
    channel = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 0.2]])
    inputs = mm.ModelInputs.build(sub, channel)
    cfg = mm.MetaModelConfig(hidden_dim=3, mp_layers=2)
    params = mm.init_params(cfg, toy.feature_width, len(toy.coordinates), 2, np.random.default_rng(4))
    params = {k: v + 0.1 for k, v in params.items()}
    order = list(sub.nodes)
    nbrs = {p: [order.index(int(u)) for u in sub.neighbors(int(v))] for p, v in enumerate(order)}
    onehots = {(p, q): mm.encode_edge(toy, int(order[p]), int(order[q])) for p in nbrs for q in nbrs[p]}
    want = loop_forward(params, toy.features[sub.nodes], nbrs, onehots, channel, 2)
    assert np.allclose(mm.forward(params, inputs), want, atol=1e-12)


def test_isolated_node_ignores_other_nodes(toy):
    sub = induced_graph(build_graph(toy), [0, 5])
    cfg = mm.MetaModelConfig(hidden_dim=4)
    params = mm.init_params(cfg, toy.feature_width, len(toy.coordinates), 2, np.random.default_rng(1))
    ch = np.array([[0.3, 0.1], [0.9, 0.4]])
    a = mm.forward(params, mm.ModelInputs.build(sub, ch))
    ch2 = ch.copy()
    ch2[1] = [5.0, -2.0]
    b = mm.forward(params, mm.ModelInputs.build(sub, ch2))
    assert a[0] == b[0] and a[1] != b[1]


def test_forward_is_permutation_equivariant(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=6)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(2))
    perm = np.random.default_rng(3).permutation(inputs.n)
    assert np.allclose(mm.forward(params, inputs.permuted(perm)), mm.forward(params, inputs)[perm], atol=1e-12)


def test_numeric_error_names_layer(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=3)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(2))
    params["mp1.bias"][0] = np.nan
    with pytest.raises(mm.NumericError, match="layer 1"):
        mm.forward(params, inputs)


# -- training ---------------------------------------------------------------

def test_single_pair_is_ranked_after_training(toy):
    sub = induced_graph(build_graph(toy), range(6))
    inputs = mm.ModelInputs.build(sub, width=0)
    cfg = mm.MetaModelConfig()
    for seed in range(20):
        params = mm.init_params(cfg, toy.feature_width, len(toy.coordinates), 0, np.random.default_rng(seed))
        res = mm.train(params, cfg, inputs, np.array([1, 4]), np.array([1.0, 0.0]), np.random.default_rng(seed))
        y = mm.forward(res.params, inputs)
        assert y[1] > y[4]


def test_linear_head_converges_to_least_squares(node_space):
    rng = np.random.default_rng(0)
    ids = rng.choice(node_space.size, 40, replace=False)
    g = DesignGraph(node_space, np.sort(ids), np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    inputs = mm.ModelInputs.build(g, width=0)
    x = inputs.features
    w_true = rng.normal(size=x.shape[1])
    targets = x @ w_true + 0.05 * rng.normal(size=len(x))
    cfg = mm.MetaModelConfig(head="linear", rank_weight=0.0, optimizer="adam", learning_rate=0.05,
                             max_train_epochs=5000, patience=200)
    params = mm.init_params(cfg, x.shape[1], len(node_space.coordinates), 0, rng, use_graph=False)
    res = mm.train(params, cfg, inputs, np.arange(len(x)), targets, rng)
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    lsq = float(((design @ coef - targets) ** 2).sum())
    assert res.loss == pytest.approx(lsq, abs=1e-3)
    assert np.allclose(mm.forward(res.params, inputs), design @ coef, atol=1e-2)


def test_zero_epochs_leave_params_unchanged(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=4, max_train_epochs=0)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(0))
    res = mm.train(params, cfg, inputs, np.array([0, 1]), np.array([0.0, 1.0]), np.random.default_rng(0))
    assert all(np.array_equal(res.params[k], params[k]) for k in params)


def test_training_is_deterministic(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=4, max_train_epochs=30)

    def run():
        params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(9))
        return mm.train(params, cfg, inputs, np.array([0, 2, 4]), np.array([0.0, 0.5, 1.0]), np.random.default_rng(9))

    a, b = run(), run()
    assert a.loss == b.loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_divergence_restarts_once_then_fails(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=4, optimizer="gd", learning_rate=1e6, max_train_epochs=50)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(0))
    with pytest.raises(mm.TrainingDiverged):
        mm.train(params, cfg, inputs, np.array([0, 1, 2]), np.array([0.0, 0.4, 1.0]), np.random.default_rng(0))


def test_training_needs_two_points(small_problem, pool_toy):
    _, inputs = small_problem
    cfg = mm.MetaModelConfig(hidden_dim=4)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(0))
    with pytest.raises(DomainError):
        mm.train(params, cfg, inputs, np.array([0]), np.array([1.0]), np.random.default_rng(0))


@pytest.mark.parametrize("bad", [{"alpha": 1.0}, {"alpha": 0.0}, {"rank_temperature": 0}, {"hidden_dim": 0},
                                 {"optimizer": "sgdm"}])
def test_config_ranges(bad):
    with pytest.raises(ConfigurationError):
        mm.MetaModelConfig(**bad)


def test_checkpoint_round_trip(tmp_path, pool_toy):
    cfg = mm.MetaModelConfig(hidden_dim=4)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4, np.random.default_rng(0))
    path = tmp_path / "ckpt.json"
    mm.save_checkpoint(path, params, cfg)
    loaded, cfg2 = mm.load_checkpoint(path)
    assert cfg2 == cfg
    assert set(loaded) == set(params)
    assert all(np.array_equal(loaded[k], params[k]) for k in params)


def test_feature_only_predictor_ignores_graph_position(pool_toy):
    g = build_graph(pool_toy)
    sub = induced_graph(g, range(pool_toy.size))
    inputs = mm.ModelInputs.build(sub, np.random.default_rng(0).random((sub.n_nodes, 4)))
    # give node 0 the features of node 7 while its neighbourhood stays different
    feats = inputs.features.copy()
    feats[0] = feats[7]
    twin = mm.ModelInputs(feats, inputs.mean_adj, inputs.mean_edge, inputs.channel)
    cfg = mm.MetaModelConfig(hidden_dim=5)
    params = mm.init_params(cfg, pool_toy.feature_width, len(pool_toy.coordinates), 4,
                            np.random.default_rng(1), use_graph=False)
    y = mm.forward(params, twin)
    assert y[0] == y[7]
    assert sub.degrees()[0] != sub.degrees()[7] or not np.array_equal(sub.neighbors(0), sub.neighbors(7))
