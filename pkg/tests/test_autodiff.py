import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnn_nas import autodiff as ad
from gnn_nas.graph import from_arrays


def param(rng, *shape, scale=1.0):
    return ad.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def small_graph(n=6, seed=0, p=0.5):
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return from_arrays(n, edges, rng.normal(size=(n, 3)), np.zeros(n, int), 1)


def weighted_sum(t, seed=99):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum_all(ad.mul(t, w))


def test_matmul_example_and_grad():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = ad.Tensor([[5.0], [6.0]], requires_grad=True)
    with ad.Tape():
        y = a @ b
        loss = ad.sum_all(y)
        ad.backward(loss)
    np.testing.assert_allclose(y.data, [[17.0], [39.0]])
    np.testing.assert_allclose(a.grad, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_allclose(b.grad, [[4.0], [6.0]])


def test_no_recording_outside_tape():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.sum_all(a @ a)
    assert y._tape is None
    with pytest.raises(RuntimeError):
        ad.backward(y)


def test_backward_twice_raises():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape():
        loss = ad.sum_all(ad.mul(a, a))
        ad.backward(loss)
        with pytest.raises(RuntimeError, match="twice"):
            ad.backward(loss)


def test_backward_needs_scalar():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape():
        y = ad.mul(a, a)
        with pytest.raises(ValueError):
            ad.backward(y)


def test_leaf_gradients_accumulate():
    a = ad.Tensor(np.array([[2.0]]), requires_grad=True)
    for _ in range(2):
        with ad.Tape():
            ad.backward(ad.mul(a, a))
    np.testing.assert_allclose(a.grad, [[8.0]])


def test_shared_input_gradients_sum():
    a = ad.Tensor(np.array([[3.0]]), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.add(ad.mul(a, a), a))
    np.testing.assert_allclose(a.grad, [[7.0]])


@pytest.mark.parametrize("op", ["matmul", "add_bcast", "mul_bcast", "concat", "slice",
                                "reshape", "block_sum", "gather", "scale", "cross_entropy",
                                "dropout_eval", "spmm"])
def test_dense_ops_fd(op):
    rng = np.random.default_rng(3)
    a, b = param(rng, 4, 6), param(rng, 6, 3)
    row = param(rng, 1, 6)
    idx = np.array([0, 2, 2, 3, 1])
    g = small_graph(4)

    def f():
        if op == "matmul":
            return weighted_sum(a @ b)
        if op == "add_bcast":
            return weighted_sum(ad.add(a, row))
        if op == "mul_bcast":
            return weighted_sum(ad.mul(a, row))
        if op == "concat":
            return weighted_sum(ad.concat_cols(a, ad.mul(a, a)))
        if op == "slice":
            return weighted_sum(ad.slice_cols(a, 1, 4))
        if op == "reshape":
            return weighted_sum(ad.reshape(a, 8, 3))
        if op == "block_sum":
            return weighted_sum(ad.block_sum(a, 3))
        if op == "gather":
            return weighted_sum(ad.gather_rows(a, idx))
        if op == "scale":
            return weighted_sum(ad.scale(a, -2.5))
        if op == "cross_entropy":
            return ad.cross_entropy(a @ b, np.array([0, 2, 1, 1]), np.array([1, 0, 1, 1], bool))
        if op == "dropout_eval":
            return weighted_sum(ad.dropout(a, 0.5, training=False, rng=None))
        return weighted_sum(ad.spmm(g.norm_adjacency("gcn"), a))
    params = [a, b] if op in ("matmul", "cross_entropy") else [a, row] if "bcast" in op else [a]
    assert ad.fd_gradient_check(f, params) < 1e-5


@pytest.mark.parametrize("kind", ad.ACTIVATIONS)
def test_activation_fd(kind):
    rng = np.random.default_rng(4)
    # keep away from relu kinks and the relu6 clip edges
    x = ad.Tensor(rng.choice([-1, 1], size=(3, 5)) * rng.uniform(0.1, 2.5, size=(3, 5)),
                  requires_grad=True)
    assert ad.fd_gradient_check(lambda: weighted_sum(ad.activation(kind, x)), [x]) < 1e-6


def test_activation_values():
    x = ad.Tensor([[-2.0, 0.5, 7.0]])
    np.testing.assert_allclose(ad.activation("relu6", x).data, [[0, 0.5, 6]])
    np.testing.assert_allclose(ad.activation("leaky_relu", x).data, [[-0.4, 0.5, 7]])
    np.testing.assert_allclose(ad.activation("elu", x).data, [[np.expm1(-2.0), 0.5, 7]], rtol=1e-6)
    np.testing.assert_allclose(ad.activation("softplus", x).data, [np.log1p(np.exp([-2.0, 0.5, 7.0]))],
                               rtol=1e-6)


def test_dropout_training():
    rng = np.random.default_rng(0)
    x = ad.Tensor(np.ones((200, 50)))
    y = ad.dropout(x, 0.6, training=True, rng=rng)
    kept = y.data != 0
    assert abs(kept.mean() - 0.4) < 0.02
    np.testing.assert_allclose(y.data[kept], 1 / 0.4, rtol=1e-6)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)


def test_cross_entropy_value():
    logits = ad.Tensor(np.log([[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]]))
    ce = ad.cross_entropy(logits, np.array([0, 2]))
    assert ce.item() == pytest.approx(-(np.log(0.7) + np.log(0.5)) / 2, rel=1e-6)
    with pytest.raises(ValueError):
        ad.cross_entropy(logits, np.array([0, 2]), np.zeros(2, bool))


# ---------------------------------------------------------------------------
# graph primitives against per-node loop oracles
# ---------------------------------------------------------------------------

def loop_aggregate(kind, messages, targets, n):
    out = np.zeros((n, messages.shape[1]))
    for i in range(n):
        rows = messages[targets == i]
        if len(rows):
            out[i] = {"sum": rows.sum(0), "mean": rows.mean(0), "max": rows.max(0)}[kind]
    return out


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
def test_segment_aggregate_matches_loop(kind):
    rng = np.random.default_rng(5)
    targets = np.sort(rng.integers(0, 5, size=12))
    targets[targets == 3] = 2  # leave node 3 empty
    targets = np.sort(targets)
    msgs = rng.normal(size=(12, 4))
    out = ad.segment_aggregate(kind, ad.Tensor(msgs), targets, 6)
    np.testing.assert_allclose(out.data, loop_aggregate(kind, msgs, targets, 6), rtol=1e-12)


@pytest.mark.parametrize("kind", ["sum", "mean", "max", "mlp"])
def test_segment_aggregate_fd(kind):
    rng = np.random.default_rng(6)
    targets = np.sort(rng.integers(0, 4, size=10))
    m = param(rng, 10, 3)
    w, b = param(rng, 3, 3), param(rng, 1, 3)
    mlp = (w, b) if kind == "mlp" else None
    f = lambda: weighted_sum(ad.segment_aggregate(kind, m, targets, 5, mlp))
    assert ad.fd_gradient_check(f, [m] + ([w, b] if mlp else [])) < 1e-5


def test_max_ties_split_gradient():
    m = ad.Tensor(np.array([[1.0], [1.0], [0.0]]), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.sum_all(ad.segment_aggregate("max", m, np.array([0, 0, 0]), 1)))
    np.testing.assert_allclose(m.grad, [[0.5], [0.5], [0.0]])


def test_neighborhood_softmax_normalizes():
    g = small_graph(8, seed=2)
    idx = g.edge_index(self_loops=True)
    logits = ad.Tensor(np.random.default_rng(0).normal(size=(idx.num_edges, 3)) * 10)
    alpha = ad.neighborhood_softmax(logits, idx).data
    sums = np.zeros((g.num_nodes, 3))
    np.add.at(sums, idx.dst, alpha)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_neighborhood_softmax_fd():
    g = small_graph(6, seed=1)
    idx = g.edge_index(self_loops=True)
    logits = param(np.random.default_rng(1), idx.num_edges, 2)
    f = lambda: weighted_sum(ad.neighborhood_softmax(logits, idx))
    assert ad.fd_gradient_check(f, [logits]) < 1e-5


def loop_propagate(coeff, x, idx, kind):
    heads = coeff.shape[1]
    d = x.shape[1] // heads
    out = np.zeros_like(x)
    for i in range(idx.num_nodes):
        edges = np.flatnonzero(idx.dst == i)
        if not len(edges):
            continue
        for k in range(heads):
            msgs = coeff[edges, k][:, None] * x[idx.src[edges], k * d:(k + 1) * d]
            out[i, k * d:(k + 1) * d] = {"sum": msgs.sum(0), "mean": msgs.mean(0),
                                         "max": msgs.max(0)}[kind]
    return out


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
@pytest.mark.parametrize("loops", [False, True])
def test_propagate_matches_loop(kind, loops):
    g = small_graph(7, seed=3, p=0.35)
    idx = g.edge_index(self_loops=loops)
    rng = np.random.default_rng(7)
    coeff = rng.normal(size=(idx.num_edges, 3))
    x = rng.normal(size=(7, 6))
    out = ad.propagate(ad.Tensor(coeff), ad.Tensor(x), idx, kind)
    np.testing.assert_allclose(out.data, loop_propagate(coeff, x, idx, kind), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
def test_propagate_fd(kind):
    g = small_graph(6, seed=4)
    idx = g.edge_index(self_loops=True)
    rng = np.random.default_rng(8)
    coeff, x = param(rng, idx.num_edges, 2), param(rng, 6, 4)
    f = lambda: weighted_sum(ad.propagate(coeff, x, idx, kind))
    assert ad.fd_gradient_check(f, [coeff, x]) < 1e-5


def test_propagate_sum_is_dense_product():
    g = small_graph(9, seed=5)
    idx = g.edge_index(self_loops=True)
    x = np.random.default_rng(0).normal(size=(9, 4))
    a = np.zeros((9, 9))
    a[idx.dst, idx.src] = 1.0
    out = ad.propagate(ad.Tensor(np.ones((idx.num_edges, 1))), ad.Tensor(x), idx, "sum")
    np.testing.assert_allclose(out.data, a @ x, rtol=1e-12)


def test_edge_dot_and_tanh_proj_fd():
    g = small_graph(6, seed=6)
    idx = g.edge_index(self_loops=True)
    rng = np.random.default_rng(9)
    l, r, p = param(rng, 6, 4), param(rng, 6, 4), param(rng, 1, 4)
    assert ad.fd_gradient_check(lambda: weighted_sum(ad.edge_dot(l, r, idx, 2)), [l, r]) < 1e-5
    assert ad.fd_gradient_check(lambda: weighted_sum(ad.edge_tanh_proj(l, r, p, idx, 2)),
                                [l, r, p]) < 1e-5


def test_edge_dot_values():
    g = small_graph(5, seed=7)
    idx = g.edge_index(self_loops=True)
    rng = np.random.default_rng(10)
    l, r = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    out = ad.edge_dot(ad.Tensor(l), ad.Tensor(r), idx, 3).data
    for e in range(idx.num_edges):
        for k in range(3):
            s = slice(2 * k, 2 * k + 2)
            assert out[e, k] == pytest.approx(l[idx.dst[e], s] @ r[idx.src[e], s])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def test_adam_matches_hand_computation():
    p = ad.Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    state = ad.AdamState(learning_rate=0.1, weight_decay=0.5)
    grads = [np.array([[0.3, -0.1]]), np.array([[-0.2, 0.4]])]
    x = p.data.copy()
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, 1):
        gg = g[0] + 0.5 * x[0]
        m = 0.9 * m + 0.1 * gg
        v = 0.999 * v + 0.001 * gg ** 2
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        p.grad = g.copy()
        ad.adam_step(state, [p])
        assert p.grad is None
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_skips_params_without_grad():
    p = ad.Tensor(np.ones((1, 2)), requires_grad=True)
    ad.adam_step(ad.AdamState(0.1), [p])
    np.testing.assert_array_equal(p.data, np.ones((1, 2)))


def test_glorot_bounds():
    w = ad.glorot(30, 20, np.random.default_rng(0))
    assert np.abs(w.data).max() <= np.sqrt(6 / 50)
    assert w.requires_grad and w.data.dtype == np.float32


def test_fd_check_detects_wrong_gradient():
    a = ad.Tensor(np.array([[0.5, 1.5]], dtype=np.float32), requires_grad=True)

    def bad():
        y = ad._emit(a.data ** 2, (a,), lambda g: (g * a.data,))  # should be 2x
        return ad.sum_all(y)
    assert ad.fd_gradient_check(bad, [a]) > 0.4
    assert a.data.dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_matmul_chain_fd_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, n, m), param(rng, m, 2)
    f = lambda: weighted_sum(ad.activation("tanh", a @ b), seed=seed)
    assert ad.fd_gradient_check(f, [a, b]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2 ** 31))
def test_softmax_rows_sum_to_one_property(n, seed):
    g = small_graph(n, seed=seed % 1000, p=0.4)
    idx = g.edge_index(self_loops=True)
    logits = np.random.default_rng(seed).normal(scale=5, size=(idx.num_edges, 2))
    alpha = ad.neighborhood_softmax(ad.Tensor(logits), idx).data
    sums = np.zeros((n, 2))
    np.add.at(sums, idx.dst, alpha)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    assert np.all(alpha >= 0)
