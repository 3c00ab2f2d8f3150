"""Dense-matrix reverse-mode differentiation.

Every value is a 2-D :class:`Tensor`.  Operations executed inside a
``with Tape():`` block are appended to that tape as they run (a Wengert
list); :func:`backward` replays the list in reverse exactly once.  Outside a
tape nothing is recorded, which is how inference runs.

The tape stack is thread-local, so independent evaluations may train
concurrently on separate threads.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .graph import EdgeIndex, Graph

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ValueError(f"tensors are matrices, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications."""

    records: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` and record it if any input needs a gradient."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise RuntimeError("tape already consumed by backward(); open a new Tape")
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires one.

    Leaf gradients accumulate; intermediate gradients are released.
    """
    if loss.size != 1:
        raise ValueError("backward() expects a scalar loss")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape")
    if tape.consumed:
        raise RuntimeError("backward called twice without a new forward pass")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        rec.out.grad = None
        grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.dtype != t.data.dtype:
                gi = gi.astype(t.data.dtype)
            if t.grad is None:
                t.grad = np.array(gi, copy=True) if t._tape is None else gi
            else:
                t.grad = t.grad + gi
    tape.records.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# dense primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    ra, ca = a.shape
    rb, cb = b.shape
    if (ra != rb and 1 not in (ra, rb)) or (ca != cb and 1 not in (ca, cb)):
        raise ValueError(f"{op} shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


mul_elementwise = mul


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def concat_cols(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=1)
    return _emit(data, tensors,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)
    return _emit(a.data[:, start:stop], (a,), vjp)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    return _emit(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(a.shape),))


def block_sum(a: Tensor, blocks: int) -> Tensor:
    """Sum each of ``blocks`` contiguous column groups: ``[r x B*d] -> [r x B]``."""
    r, c = a.shape
    if c % blocks:
        raise ValueError(f"{c} columns do not split into {blocks} blocks")
    d = c // blocks
    return _emit(a.data.reshape(r, blocks, d).sum(axis=2), (a,),
                 lambda g: (np.repeat(g, d, axis=1),))


def sum_all(a: Tensor) -> Tensor:
    return _emit(a.data.sum(keepdims=True).reshape(1, 1), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def _scatter_matrix(idx: np.ndarray, num_rows: int) -> sp.csr_matrix:
    m = len(idx)
    return sp.csr_matrix((np.ones(m, dtype=np.float32), (idx, np.arange(m))),
                         shape=(num_rows, m))


def scatter_add(values: np.ndarray, idx: np.ndarray, num_rows: int,
                mat: sp.csr_matrix | None = None) -> np.ndarray:
    """``out[idx[e]] += values[e]`` via a sparse incidence product."""
    mat = _scatter_matrix(idx, num_rows) if mat is None else mat
    return np.asarray(mat @ values).astype(values.dtype, copy=False)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    return _emit(a.data[idx], (a,), lambda g: (scatter_add(g, idx, a.shape[0]),))


def spmm(mat: sp.spmatrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times ``a``."""
    mat_t = mat.T.tocsr()
    return _emit(np.asarray(mat @ a.data), (a,), lambda g: (np.asarray(mat_t @ g),))


def zeros(rows: int, cols: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=dtype))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

LEAKY_SLOPE = 0.2


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _act(kind: str, x: np.ndarray):
    """Return (value, derivative-from-(x, y)) for an activation."""
    if kind == "linear":
        return x, lambda x, y: np.ones_like(x)
    if kind == "relu":
        return np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype)
    if kind == "relu6":
        return np.clip(x, 0, 6), lambda x, y: ((x > 0) & (x < 6)).astype(x.dtype)
    if kind == "leaky_relu":
        return (np.where(x > 0, x, LEAKY_SLOPE * x),
                lambda x, y: np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype))
    if kind == "tanh":
        return np.tanh(x), lambda x, y: 1 - y * y
    if kind == "sigmoid":
        return _sigmoid(x), lambda x, y: y * (1 - y)
    if kind == "softplus":
        return np.logaddexp(0, x), lambda x, y: _sigmoid(x)
    if kind == "elu":
        neg = np.expm1(np.minimum(x, 0))
        return np.where(x > 0, x, neg), lambda x, y: np.where(x > 0, 1.0, y + 1.0).astype(x.dtype)
    raise ValueError(f"unknown activation {kind!r}")


ACTIVATIONS = ("tanh", "linear", "softplus", "sigmoid", "elu", "relu", "relu6", "leaky_relu")


def activation(kind: str, x: Tensor) -> Tensor:
    y, deriv = _act(kind, x.data)
    y = y.astype(x.data.dtype, copy=False)
    if kind == "linear":
        return _emit(y, (x,), lambda g: (g,))
    return _emit(y, (x,), lambda g: (g * deriv(x.data, y),))


# ---------------------------------------------------------------------------
# graph primitives
# ---------------------------------------------------------------------------

def _as_index(graph) -> EdgeIndex:
    return graph.edge_index(self_loops=False) if isinstance(graph, Graph) else graph


def _segment_max(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Row-wise max per segment; empty segments give zero rows."""
    n = len(indptr) - 1
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    nonempty = indptr[1:] > indptr[:-1]
    if values.shape[0]:
        red = np.maximum.reduceat(values, indptr[:-1][nonempty], axis=0)
        out[nonempty] = red
    return out


def _segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    n = len(indptr) - 1
    if values.dtype.kind == "f" and values.ndim == 2:
        # a 0/1 CSR product is much faster than reduceat on wide rows
        E = values.shape[0]
        ones = sp.csr_matrix((np.ones(E, dtype=values.dtype), np.arange(E), indptr), shape=(n, E))
        return np.asarray(ones @ values)
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    nonempty = indptr[1:] > indptr[:-1]
    if values.shape[0]:
        out[nonempty] = np.add.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def _indptr_from_targets(targets: np.ndarray, num_nodes: int) -> np.ndarray:
    if len(targets) and np.any(np.diff(targets) < 0):
        raise ValueError("targets must be sorted")
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(targets, minlength=num_nodes), out=indptr[1:])
    return indptr


def _max_vjp(values, out, targets, indptr, g):
    """Route gradient to the arg-max entries, splitting ties evenly."""
    hit = (values == out[targets]).astype(values.dtype)
    counts = _segment_sum(hit, indptr)
    return g[targets] * hit / np.maximum(counts, 1)[targets]


AGGREGATORS = ("sum", "mean", "max", "mlp")


def segment_aggregate(kind: str, messages: Tensor, targets: np.ndarray, num_nodes: int,
                      mlp_params: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Reduce per-edge ``messages`` onto their (sorted) target nodes.

    ``mlp`` sums and then applies ``relu(x @ W + b)`` with
    ``mlp_params=(W, b)``.  Empty segments produce zero rows.
    """
    targets = np.asarray(targets, dtype=np.int64)
    indptr = _indptr_from_targets(targets, num_nodes)
    counts = np.diff(indptr).astype(messages.data.dtype)[:, None]
    if kind in ("sum", "mlp"):
        out = _emit(_segment_sum(messages.data, indptr), (messages,),
                    lambda g: (g[targets],))
        if kind == "mlp":
            if mlp_params is None:
                raise ValueError("mlp aggregation needs mlp_params=(W, b)")
            w, b = mlp_params
            out = activation("relu", add(matmul(out, w), b))
        return out
    if kind == "mean":
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(messages.data.dtype)
        return _emit(_segment_sum(messages.data, indptr) * inv, (messages,),
                     lambda g: ((g * inv)[targets],))
    if kind == "max":
        out = _segment_max(messages.data, indptr)
        return _emit(out, (messages,),
                     lambda g: (_max_vjp(messages.data, out, targets, indptr, g),))
    raise ValueError(f"unknown aggregator {kind!r}")


def neighborhood_softmax(logits: Tensor, graph) -> Tensor:
    """Softmax of per-edge logits over each target node's incoming edges.

    ``logits`` is ``[num_edges x K]``; every column is normalised
    independently (one column per attention head).
    """
    index = _as_index(graph)
    if logits.shape[0] != index.num_edges:
        raise ValueError("one logit row per edge required")
    x = logits.data
    mx = _segment_max(x, index.indptr)
    e = np.exp(x - mx[index.dst])
    denom = _segment_sum(e, index.indptr)
    alpha = e / denom[index.dst]

    def vjp(g):
        s = _segment_sum(alpha * g, index.indptr)
        return (alpha * (g - s[index.dst]),)
    return _emit(alpha, (logits,), vjp)


def _common(*arrays: np.ndarray) -> list[np.ndarray]:
    dtype = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def propagate(coeff: Tensor, x: Tensor, index: EdgeIndex, kind: str) -> Tensor:
    """Multi-head weighted neighbourhood reduction.

    ``coeff`` holds one column per head (``[E x K]``) and ``x`` stores the K
    heads side by side (``[n x K*d]``).  Node ``i`` receives, per head,
    the ``kind`` reduction (sum, mean or max) of ``coeff[e] * x[src[e]]``
    over edges with ``dst[e] == i``.  Empty neighbourhoods give zero rows.
    """
    n, kd = x.shape
    heads = coeff.shape[1]
    if coeff.shape[0] != index.num_edges or kd % heads or n != index.num_nodes:
        raise ValueError("propagate shape mismatch")
    if kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown propagation kind {kind!r}")
    cd, xd = _common(coeff.data, x.data)
    indptr, src = index.indptr, index.src
    if kind == "max":
        out = _kernels.segmax(indptr, src, cd, xd, heads)

        def vjp(g):
            gx, gc = _kernels.segmax_backward(indptr, src, cd, xd, out, _common(g, xd)[0],
                                              heads, coeff.requires_grad)
            return (gc if coeff.requires_grad else None), gx
        return _emit(out, (coeff, x), vjp)

    d = kd // heads
    mats = [index.matrix(cd[:, k]) for k in range(heads)]
    out = np.empty_like(xd)
    for k in range(heads):
        out[:, k * d:(k + 1) * d] = mats[k] @ xd[:, k * d:(k + 1) * d]
    inv = None
    if kind == "mean":
        deg = np.diff(indptr)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0).astype(out.dtype)[:, None]
        out *= inv

    def vjp(g):
        g = _common(g, xd)[0]
        if inv is not None:
            g = g * inv
        gx = np.empty_like(xd)
        for k in range(heads):
            gx[:, k * d:(k + 1) * d] = mats[k].T @ g[:, k * d:(k + 1) * d]
        gc = _kernels.sddmm(indptr, src, g, xd, heads) if coeff.requires_grad else None
        return gc, gx
    return _emit(out, (coeff, x), vjp)


def edge_dot(left: Tensor, right: Tensor, index: EdgeIndex, heads: int) -> Tensor:
    """Per-head inner products ``<left[dst], right[src]>`` -> ``[E x K]``."""
    ld, rd = _common(left.data, right.data)
    indptr, src = index.indptr, index.src
    out = _kernels.sddmm(indptr, src, ld, rd, heads)

    def vjp(g):
        g = _common(g, ld)[0]
        d = ld.shape[1] // heads
        gl = np.empty_like(ld)
        gr = np.empty_like(rd)
        for k in range(heads):
            m = index.matrix(g[:, k])
            cols = slice(k * d, (k + 1) * d)
            gl[:, cols] = m @ rd[:, cols]
            gr[:, cols] = m.T @ ld[:, cols]
        return gl, gr
    return _emit(out, (left, right), vjp)


def edge_tanh_proj(left: Tensor, right: Tensor, proj: Tensor, index: EdgeIndex,
                   heads: int) -> Tensor:
    """Per-head ``proj_k . tanh(left[dst] + right[src])`` -> ``[E x K]``.

    ``proj`` is ``[1 x K*d]``.  Runs head by head to bound memory at
    ``[E x d]``.
    """
    ld, rd, pd = _common(left.data, right.data, proj.data)
    d = ld.shape[1] // heads
    src, dst = index.src, index.dst
    out = np.empty((index.num_edges, heads), dtype=ld.dtype)
    for k in range(heads):
        cols = slice(k * d, (k + 1) * d)
        out[:, k] = np.tanh(ld[dst, cols] + rd[src, cols]) @ pd[0, cols]

    def vjp(g):
        gl = np.empty_like(ld)
        gr = np.empty_like(rd)
        gp = np.empty_like(pd)
        for k in range(heads):
            cols = slice(k * d, (k + 1) * d)
            t = np.tanh(ld[dst, cols] + rd[src, cols])
            gk = g[:, k:k + 1].astype(ld.dtype, copy=False)
            gp[0, cols] = gk.T @ t
            gpre = (gk * pd[:, cols]) * (1 - t * t)
            gl[:, cols] = _segment_sum(gpre, index.indptr)
            gr[:, cols] = index.scatter_src @ gpre
        return gl, gr, gp
    return _emit(out, (left, right, proj), vjp)


# ---------------------------------------------------------------------------
# loss, dropout
# ---------------------------------------------------------------------------

def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the masked rows."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0]) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("cross_entropy over an empty mask")
    lp = log_softmax_rows(logits.data[rows])
    picked = lp[np.arange(len(rows)), labels[rows]]
    loss = -picked.mean()

    def vjp(g):
        probs = np.exp(lp)
        probs[np.arange(len(rows)), labels[rows]] -= 1.0
        out = np.zeros_like(logits.data)
        out[rows] = probs * (g[0, 0] / len(rows))
        return (out,)
    return _emit(np.array([[loss]], dtype=logits.data.dtype), (logits,), vjp)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.data.dtype)
    keep /= 1.0 - rate
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

def glorot(rows: int, cols: int, rng: np.random.Generator, fan_in: int | None = None,
           fan_out: int | None = None, name: str | None = None) -> Tensor:
    fan_in = rows if fan_in is None else fan_in
    fan_out = cols if fan_out is None else fan_out
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(rows: int, cols: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=np.float32), requires_grad=True, name=name)


@dataclass
class AdamState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One Adam update with L2 weight decay folded into the gradient.

    Gradients are consumed (reset to ``None``).  Parameters without a
    gradient are left alone.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** t
    corr2 = 1 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def fd_gradient_check(forward: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-4, floor: float = 1e-6,
                      retry_steps: Sequence[float] = (1e-5, 1e-6),
                      retry_above: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    Parameters are promoted to float64 for the duration of the check and
    restored afterwards.  ``forward`` must be deterministic and return a
    scalar tensor.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.

    Piecewise-linear operators (relu family, max) have kinks; a step that
    straddles one corrupts the difference quotient.  Coordinates whose error
    exceeds ``retry_above`` are re-measured with each of ``retry_steps`` and
    keep the smallest error.  A wrong gradient fails at every step size.
    """
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        with Tape():
            loss = forward()
        if loss.requires_grad:
            backward(loss)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        worst = 0.0
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                ana = a.reshape(-1)[j]
                err = math.inf
                for step in (h, *retry_steps):
                    orig = flat[j]
                    flat[j] = orig + step
                    up = forward().item()
                    flat[j] = orig - step
                    down = forward().item()
                    flat[j] = orig
                    num = (up - down) / (2 * step)
                    err = min(err, abs(ana - num) / max(abs(ana), abs(num), floor))
                    if err <= retry_above:
                        break
                worst = max(worst, err)
        return float(worst)
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
