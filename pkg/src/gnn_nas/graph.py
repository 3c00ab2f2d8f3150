"""Graph data model, the GNAS-Graph text format, and a synthetic generator.

Graphs are stored in CSR form: ``col_indices[row_offsets[i]:row_offsets[i+1]]``
lists the neighbours of node ``i``.  Every undirected edge occupies two
directed slots and self-loops are never stored; operators that need them add
the self contribution themselves (see :meth:`Graph.edge_index`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAGIC = "GNAS-GRAPH 1"
MASK_NAMES = ("train", "valid", "test", "none")


class GraphFormatError(ValueError):
    """Raised when a GNAS-Graph file or array bundle is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_classes: int
    num_features: int
    num_nodes: int
    num_edges: int


@dataclass(frozen=True)
class EdgeIndex:
    """Directed message edges ``src -> dst`` sorted by (dst, src).

    Built from a :class:`Graph`, optionally with one self-loop per node.
    ``indptr`` delimits each target node's incoming edges and ``rev[e]`` is
    the position of the reversed edge.
    """

    src: np.ndarray
    dst: np.ndarray
    indptr: np.ndarray
    rev: np.ndarray
    num_nodes: int

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def in_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def scatter_src(self) -> sp.csr_matrix:
        """``[n x E]`` incidence matrix summing edge rows onto their source."""
        cache = self.__dict__.setdefault("_scatter", {})
        if "src" not in cache:
            E = self.num_edges
            cache["src"] = sp.csr_matrix(
                (np.ones(E, dtype=np.float32), (self.src, np.arange(E))),
                shape=(self.num_nodes, E))
        return cache["src"]

    def matrix(self, values: np.ndarray) -> sp.csr_matrix:
        """Sparse ``[n x n]`` matrix with ``values`` at (dst, src)."""
        return sp.csr_matrix(
            (values, self.src, self.indptr), shape=(self.num_nodes, self.num_nodes)
        )


@dataclass(frozen=True, eq=False)
class Graph:
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray
    valid_mask: np.ndarray
    test_mask: np.ndarray
    name: str = "graph"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.row_offsets, self.col_indices, self.features, self.labels,
                    self.train_mask, self.valid_mask, self.test_mask):
            arr.setflags(write=False)
        self.validate()

    # -- basic shape -------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def num_edges(self) -> int:
        return len(self.col_indices)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def meta(self) -> DatasetMeta:
        return DatasetMeta(self.name, self.num_classes, self.num_features,
                           self.num_nodes, self.num_edges)

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def edge_list(self) -> np.ndarray:
        """All directed edge slots as an ``[num_edges x 2]`` array (sorted)."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        return np.stack([rows, self.col_indices], axis=1)

    def validate(self) -> None:
        n = self.num_nodes
        ro, ci = self.row_offsets, self.col_indices
        if n < 0 or ro[0] != 0 or np.any(np.diff(ro) < 0) or ro[-1] != len(ci):
            raise GraphFormatError("row_offsets must be nondecreasing from 0 to num_edges")
        if len(ci) and (ci.min() < 0 or ci.max() >= n):
            raise GraphFormatError("column index out of range")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphFormatError("features must be [num_nodes x num_features]")
        if self.labels.shape != (n,):
            raise GraphFormatError("exactly one label per node required")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphFormatError("label out of range")
        masks = np.stack([self.train_mask, self.valid_mask, self.test_mask])
        if masks.shape != (3, n):
            raise GraphFormatError("masks must cover every node")
        if np.any(masks.sum(axis=0) > 1):
            raise GraphFormatError("non-disjoint masks")
        rows = np.repeat(np.arange(n), np.diff(ro))
        if np.any(rows == ci):
            raise GraphFormatError("self-loops are not stored")
        keys = rows.astype(np.int64) * max(n, 1) + ci
        if np.any(np.diff(keys) <= 0):
            raise GraphFormatError("CSR rows must be sorted without duplicates")
        rkeys = ci.astype(np.int64) * max(n, 1) + rows
        pos = np.searchsorted(keys, rkeys)
        if len(keys) and (np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != rkeys)):
            raise GraphFormatError("adjacency is not symmetric")

    # -- derived structures (cached, the graph is immutable) ---------------
    def edge_index(self, self_loops: bool = True) -> EdgeIndex:
        key = ("edge_index", self_loops)
        if key not in self._cache:
            self._cache[key] = _build_edge_index(self, self_loops)
        return self._cache[key]

    def norm_adjacency(self, kind: str) -> sp.csr_matrix:
        """Constant propagation matrices used by the convolution operators.

        ``gcn``: D~^-1/2 (A+I) D~^-1/2; ``sym``: D^-1/2 A D^-1/2 (isolated
        rows zero); ``mean``: D^-1 A (isolated rows zero).
        """
        key = ("adj", kind)
        if key in self._cache:
            return self._cache[key]
        n = self.num_nodes
        if kind == "gcn":
            idx = self.edge_index(self_loops=True)
            deg = idx.in_degree.astype(np.float64)
            inv = 1.0 / np.sqrt(deg)
            vals = inv[idx.dst] * inv[idx.src]
            mat = idx.matrix(vals.astype(np.float32))
        elif kind in ("sym", "mean"):
            idx = self.edge_index(self_loops=False)
            deg = idx.in_degree.astype(np.float64)
            with np.errstate(divide="ignore"):
                inv = np.where(deg > 0, 1.0 / deg, 0.0)
            if kind == "sym":
                vals = np.sqrt(inv)[idx.dst] * np.sqrt(inv)[idx.src]
            else:
                vals = inv[idx.dst]
            mat = idx.matrix(vals.astype(np.float32))
        else:
            raise ValueError(f"unknown adjacency normalisation {kind!r}")
        assert mat.shape == (n, n)
        self._cache[key] = mat
        return mat

    def with_masks(self, train: np.ndarray, valid: np.ndarray, test: np.ndarray) -> "Graph":
        return Graph(self.row_offsets, self.col_indices, self.features, self.labels,
                     self.num_classes, np.asarray(train, bool), np.asarray(valid, bool),
                     np.asarray(test, bool), name=self.name)


def _build_edge_index(g: Graph, self_loops: bool) -> EdgeIndex:
    n = g.num_nodes
    dst = np.repeat(np.arange(n), g.degrees())
    src = g.col_indices.astype(np.int64)
    if self_loops:
        dst = np.concatenate([dst, np.arange(n)])
        src = np.concatenate([src, np.arange(n)])
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
    keys = dst * max(n, 1) + src
    rev = np.searchsorted(keys, src * max(n, 1) + dst)
    return EdgeIndex(src=src, dst=dst, indptr=indptr, rev=rev, num_nodes=n)


def degree(g: Graph, i: int) -> int:
    if not 0 <= i < g.num_nodes:
        raise IndexError(f"node {i} out of range for {g.num_nodes} nodes")
    return int(g.row_offsets[i + 1] - g.row_offsets[i])


def from_arrays(num_nodes: int, edges, features, labels, num_classes: int,
                train=None, valid=None, test=None, name: str = "graph") -> Graph:
    """Build a :class:`Graph` from an undirected edge list.

    Edges may be given once or in both directions; duplicates and self-loops
    are dropped.  Missing masks default to all-False.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise GraphFormatError("edge index out of range")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    keys = np.unique(both[:, 0] * max(num_nodes, 1) + both[:, 1])
    rows, cols = np.divmod(keys, max(num_nodes, 1))
    row_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=row_offsets[1:])
    empty = np.zeros(num_nodes, dtype=bool)
    return Graph(
        row_offsets=row_offsets,
        col_indices=cols.astype(np.int64),
        features=np.asarray(features, dtype=np.float32).reshape(num_nodes, -1),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=int(num_classes),
        train_mask=empty.copy() if train is None else np.asarray(train, bool),
        valid_mask=empty.copy() if valid is None else np.asarray(valid, bool),
        test_mask=empty.copy() if test is None else np.asarray(test, bool),
        name=name,
    )


def load_graph(path, name: str | None = None) -> Graph:
    """Read a GNAS-Graph text file.

    Errors are raised as :class:`GraphFormatError` carrying the 1-based line
    number of the offending line.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def line(k: int) -> list[str]:
        if k >= len(lines):
            raise GraphFormatError("unexpected end of file", k + 1)
        return lines[k].split()

    if not lines or lines[0].strip() != MAGIC:
        raise GraphFormatError(f"expected header {MAGIC!r}", 1)
    try:
        n, m, f, c = (int(v) for v in line(1))
    except ValueError:
        raise GraphFormatError("malformed header: expected 4 integers", 2) from None
    if min(n, m, f, c) < 0 or c < 1:
        raise GraphFormatError("malformed header: negative count", 2)

    edges = np.zeros((m, 2), dtype=np.int64)
    for k in range(m):
        toks = line(2 + k)
        try:
            u, v = (int(t) for t in toks)
        except ValueError:
            raise GraphFormatError("malformed edge line", 3 + k) from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(f"edge index out of range ({u}, {v})", 3 + k)
        edges[k] = (u, v)

    labels = np.zeros(n, dtype=np.int64)
    feats = np.zeros((n, f), dtype=np.float32)
    masks = {name_: np.zeros(n, dtype=bool) for name_ in MASK_NAMES}
    base = 2 + m
    for i in range(n):
        toks = line(base + i)
        lineno = base + i + 1
        if len(toks) != 2 + f:
            raise GraphFormatError(f"expected {2 + f} fields, got {len(toks)}", lineno)
        try:
            labels[i] = int(toks[0])
            feats[i] = [float(t) for t in toks[2:]]
        except ValueError:
            raise GraphFormatError("malformed node line", lineno) from None
        if not 0 <= labels[i] < c:
            raise GraphFormatError(f"label {labels[i]} out of range", lineno)
        if toks[1] not in masks:
            raise GraphFormatError(f"unknown mask {toks[1]!r}", lineno)
        masks[toks[1]][i] = True
    if any(s.strip() for s in lines[base + n:]):
        raise GraphFormatError("trailing content after node block", base + n + 1)

    return from_arrays(n, edges, feats, labels, c, masks["train"], masks["valid"],
                       masks["test"], name=name or path.stem)


def save_graph(g: Graph, path) -> None:
    """Write ``g`` in GNAS-Graph format, each undirected edge once."""
    el = g.edge_list()
    el = el[el[:, 0] < el[:, 1]]
    mask_names = np.full(g.num_nodes, "none", dtype=object)
    mask_names[g.train_mask] = "train"
    mask_names[g.valid_mask] = "valid"
    mask_names[g.test_mask] = "test"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MAGIC + "\n")
        fh.write(f"{g.num_nodes} {len(el)} {g.num_features} {g.num_classes}\n")
        for u, v in el:
            fh.write(f"{u} {v}\n")
        for i in range(g.num_nodes):
            feats = " ".join(repr(float(x)) for x in g.features[i])
            fh.write(f"{g.labels[i]} {mask_names[i]} {feats}".rstrip() + "\n")


def split_last_n(g: Graph, n: int) -> Graph:
    """Hold out the last ``n`` stored nodes: first half valid, second half test."""
    if n % 2 or n < 0 or n >= g.num_nodes:
        raise ValueError(f"holdout size must be even and below num_nodes, got {n}")
    total = g.num_nodes
    train = np.zeros(total, dtype=bool)
    valid = np.zeros(total, dtype=bool)
    test = np.zeros(total, dtype=bool)
    train[: total - n] = True
    valid[total - n: total - n // 2] = True
    test[total - n // 2:] = True
    return g.with_masks(train, valid, test)


def generate_synthetic(num_nodes: int, num_classes: int, num_features: int,
                       intra_p: float, inter_p: float, signal: float, seed: int,
                       holdout: int | None = None) -> Graph:
    """Stochastic block model with equal-size classes in shuffled node order.

    Node features are ``signal * onehot(label) + (1 - signal) * U[0, 1)``
    over ``num_features`` columns (the one-hot lives in the first
    ``num_classes`` columns).  The last ``holdout`` nodes become the
    validation/test split; by default a third of the graph, rounded down to
    an even count.
    """
    if not (0.0 <= inter_p < intra_p <= 1.0):
        raise ValueError("need 0 <= inter_p < intra_p <= 1")
    if not 0.0 <= signal <= 1.0:
        raise ValueError("signal must lie in [0, 1]")
    if num_features < num_classes or num_classes < 1:
        raise ValueError("num_features must be >= num_classes >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes)

    iu, ju = np.triu_indices(num_nodes, k=1)
    p = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    feats = (1.0 - signal) * rng.random((num_nodes, num_features))
    feats[np.arange(num_nodes), labels] += signal

    g = from_arrays(num_nodes, edges, feats, labels, num_classes,
                    name=f"sbm{num_nodes}")
    if holdout is None:
        holdout = 2 * (num_nodes // 6)
    return split_last_n(g, holdout)


def majority_baseline(g: Graph) -> float:
    """Validation accuracy of always predicting the most common train label."""
    if not g.valid_mask.any():
        raise ValueError("empty validation mask")
    counts = np.bincount(g.labels[g.train_mask], minlength=g.num_classes)
    guess = int(np.argmax(counts))
    return float(np.mean(g.labels[g.valid_mask] == guess))
