"""Differentiable GNN forward passes for both architecture families.

Macro layers follow the attention -> heads -> aggregate -> dim -> activation
layout, with the node's own state entering through an implicit self-loop.
Micro cells wire two convolution operators in parallel or stacked, merge
them, and end with a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DatasetMeta, EdgeIndex, Graph

ATTENTIONS = ("const", "gcn", "gat", "sym-gat", "cos", "linear", "gen_linear")
HEADS = (2, 4, 8, 16, 32, 64)
MACRO_AGGREGATORS = ("sum", "mean", "max", "mlp")
DIMS = (4, 8, 16, 32, 64, 128, 256)
MACRO_ACTIVATIONS = ("tanh", "linear", "softplus", "sigmoid", "elu", "relu", "relu6", "leaky_relu")

CONVS = tuple(f"gat{k}" for k in range(1, 9)) + ("gcn", "cheb", "sage", "arma", "sg", "linear", "zero")
WIRINGS = ("parallel", "stacked")
COMBINES = ("add", "product", "concat")
MICRO_ACTIVATIONS = ("sigmoid", "tanh", "elu", "relu", "linear")
LEARNING_RATES = (1e-2, 1e-3, 1e-4)
DROPOUTS = tuple(round(0.1 * i, 1) for i in range(10))
WEIGHT_DECAYS = (0.0, 1e-3, 1e-4, 5e-4, 1e-5, 5e-5)
HIDDEN_UNITS = (8, 16, 32, 64, 128, 256, 512)

MACRO_DROPOUT = 0.6


@dataclass(frozen=True)
class MacroLayerConfig:
    att: str
    heads: int
    agg: str
    dim: int
    act: str

    def __post_init__(self):
        for value, options, what in ((self.att, ATTENTIONS, "attention"),
                                     (self.heads, HEADS, "heads"),
                                     (self.agg, MACRO_AGGREGATORS, "aggregator"),
                                     (self.dim, DIMS, "dim"),
                                     (self.act, MACRO_ACTIVATIONS, "activation")):
            if value not in options:
                raise ValueError(f"invalid {what} {value!r}")

    @property
    def width(self) -> int:
        return self.heads * self.dim


@dataclass(frozen=True)
class MicroCellConfig:
    conv1: str
    conv2: str
    wiring: str
    comb: str
    act: str
    lr: float
    dropout: float
    weight_decay: float
    hidden_units: int

    def __post_init__(self):
        for value, options, what in ((self.conv1, CONVS, "conv"), (self.conv2, CONVS, "conv"),
                                     (self.wiring, WIRINGS, "wiring"),
                                     (self.comb, COMBINES, "combine"),
                                     (self.act, MICRO_ACTIVATIONS, "activation"),
                                     (self.lr, LEARNING_RATES, "learning rate"),
                                     (self.dropout, DROPOUTS, "dropout"),
                                     (self.weight_decay, WEIGHT_DECAYS, "weight decay"),
                                     (self.hidden_units, HIDDEN_UNITS, "hidden units")):
            if value not in options:
                raise ValueError(f"invalid {what} {value!r}")

    @property
    def combined_width(self) -> int:
        return 2 * self.hidden_units if self.comb == "concat" else self.hidden_units


class ModelParams(dict):
    """Name -> weight tensor mapping for one instantiated architecture."""

    @property
    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self[k].data = arr.copy()


@dataclass
class GNNModel:
    params: ModelParams
    forward_fn: Callable
    kind: str

    def forward(self, graph: Graph, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_fn(graph, training, rng)

    @property
    def param_count(self) -> int:
        return self.params.count


def _meta(dataset) -> tuple[int, int]:
    if isinstance(dataset, (Graph, DatasetMeta)):
        return dataset.num_features, dataset.num_classes
    num_features, num_classes = dataset
    return num_features, num_classes


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def gcn_coefficients(index: EdgeIndex, sqrt: bool = False) -> np.ndarray:
    """``1/(d_i d_j)`` per edge, degrees counted with the self-loop."""
    deg = index.in_degree.astype(np.float64)
    c = 1.0 / (deg[index.dst] * deg[index.src])
    return np.sqrt(c) if sqrt else c


def attention_coefficients(att: str, z: Tensor, index: EdgeIndex, heads: int,
                           att_l: Tensor | None = None, att_r: Tensor | None = None,
                           att_a: Tensor | None = None, gcn_sqrt: bool = False) -> Tensor:
    """Per-edge, per-head coefficients ``[E x heads]``.

    ``z`` is the projected node state, heads side by side.  ``att_l`` acts on
    the receiving node, ``att_r`` on the sending node (both ``[1 x heads*d]``
    row vectors applied per head).  ``const`` and ``gcn`` are returned
    as-is; the learned mechanisms go through :func:`neighborhood_softmax`.
    """
    E = index.num_edges
    dtype = z.data.dtype
    if att == "const":
        return Tensor(np.ones((E, heads), dtype=dtype))
    if att == "gcn":
        c = gcn_coefficients(index, gcn_sqrt).astype(dtype)
        return Tensor(np.repeat(c[:, None], heads, axis=1))

    if att in ("gat", "sym-gat"):
        s_dst = ad.block_sum(ad.mul(z, att_l), heads)
        s_src = ad.block_sum(ad.mul(z, att_r), heads)
        logits = ad.activation("leaky_relu", ad.add(ad.gather_rows(s_dst, index.dst),
                                                    ad.gather_rows(s_src, index.src)))
        if att == "sym-gat":
            logits = ad.add(logits, ad.gather_rows(logits, index.rev))
    elif att == "cos":
        logits = ad.edge_dot(ad.mul(z, att_l), ad.mul(z, att_r), index, heads)
    elif att == "linear":
        s_src = ad.block_sum(ad.mul(z, att_l), heads)
        logits = ad.activation("tanh", ad.gather_rows(s_src, index.src))
    elif att == "gen_linear":
        logits = ad.edge_tanh_proj(ad.mul(z, att_l), ad.mul(z, att_r), att_a, index, heads)
    else:
        raise ValueError(f"unknown attention mechanism {att!r}")
    return ad.neighborhood_softmax(logits, index)


def _attention_params(att: str, heads: int, dim: int, rng, prefix: str) -> ModelParams:
    p = ModelParams()
    width = heads * dim
    names = {"gat": ("l", "r"), "sym-gat": ("l", "r"), "cos": ("l", "r"),
             "linear": ("l",), "gen_linear": ("l", "r", "a")}.get(att, ())
    for side in names:
        p[f"{prefix}att_{side}"] = ad.glorot(1, width, rng, fan_in=dim, fan_out=1)
    return p


# ---------------------------------------------------------------------------
# macro space
# ---------------------------------------------------------------------------

def init_macro_layer(cfg: MacroLayerConfig, d_in: int, rng, prefix: str = "",
                     heads: int | None = None, dim: int | None = None) -> ModelParams:
    heads = cfg.heads if heads is None else heads
    dim = cfg.dim if dim is None else dim
    p = ModelParams()
    p[f"{prefix}weight"] = ad.glorot(d_in, heads * dim, rng, fan_out=dim)
    p.update(_attention_params(cfg.att, heads, dim, rng, prefix))
    if cfg.agg == "mlp":
        p[f"{prefix}mlp_weight"] = ad.glorot(dim, dim, rng)
        p[f"{prefix}mlp_bias"] = ad.zeros_param(1, dim)
    p[f"{prefix}bias"] = ad.zeros_param(1, heads * dim)
    return p


def macro_layer_forward(cfg: MacroLayerConfig, h: Tensor, graph: Graph, params: dict,
                        prefix: str = "", heads: int | None = None,
                        gcn_sqrt: bool = False) -> Tensor:
    """One macro layer: ``act(agg_j(e_ij * W h_j) + b)`` over j in N(i) plus i.

    ``heads`` overrides the configured head count (the output layer uses 1).
    """
    heads = cfg.heads if heads is None else heads
    w = params[f"{prefix}weight"]
    if h.shape[1] != w.shape[0]:
        raise ValueError(f"layer expects {w.shape[0]} input columns, got {h.shape[1]}")
    index = graph.edge_index(self_loops=True)
    z = ad.matmul(h, w)
    coeff = attention_coefficients(cfg.att, z, index, heads,
                                   params.get(f"{prefix}att_l"), params.get(f"{prefix}att_r"),
                                   params.get(f"{prefix}att_a"), gcn_sqrt=gcn_sqrt)
    if cfg.agg == "mlp":
        out = ad.propagate(coeff, z, index, "sum")
        n, width = out.shape
        d = width // heads
        out = ad.reshape(out, n * heads, d)
        out = ad.activation("relu", ad.add(ad.matmul(out, params[f"{prefix}mlp_weight"]),
                                           params[f"{prefix}mlp_bias"]))
        out = ad.reshape(out, n, width)
    else:
        out = ad.propagate(coeff, z, index, cfg.agg)
    out = ad.add(out, params[f"{prefix}bias"])
    return ad.activation(cfg.act, out)


def build_macro_model(layer_cfgs, dataset, rng: np.random.Generator | int = 0,
                      dropout: float = MACRO_DROPOUT, gcn_sqrt: bool = False) -> GNNModel:
    """Two-layer macro network producing ``[n x num_classes]`` logits.

    The second layer always emits one head of ``num_classes`` columns; its
    sampled head count and dimension are ignored.
    """
    if len(layer_cfgs) != 2:
        raise ValueError("macro architectures have exactly 2 layers")
    rng = np.random.default_rng(rng)
    num_features, num_classes = _meta(dataset)
    first, second = layer_cfgs
    params = ModelParams()
    params.update(init_macro_layer(first, num_features, rng, "l1."))
    params.update(init_macro_layer(second, first.width, rng, "l2.", heads=1, dim=num_classes))

    def forward(graph, training, drop_rng):
        x = Tensor(graph.features)
        x = ad.dropout(x, dropout, training, drop_rng)
        x = macro_layer_forward(first, x, graph, params, "l1.", gcn_sqrt=gcn_sqrt)
        x = ad.dropout(x, dropout, training, drop_rng)
        return macro_layer_forward(second, x, graph, params, "l2.", heads=1, gcn_sqrt=gcn_sqrt)

    return GNNModel(params, forward, "macro")


# ---------------------------------------------------------------------------
# micro space
# ---------------------------------------------------------------------------

def _gat_heads(kind: str) -> int:
    return int(kind[3:])


def init_conv(kind: str, d_in: int, out_dim: int, rng, prefix: str = "") -> ModelParams:
    p = ModelParams()
    if kind == "zero":
        return p
    if kind.startswith("gat"):
        k = _gat_heads(kind)
        p[f"{prefix}weight"] = ad.glorot(d_in, k * out_dim, rng, fan_out=out_dim)
        p.update(_attention_params("gat", k, out_dim, rng, prefix))
        p[f"{prefix}proj"] = ad.glorot(k * out_dim, out_dim, rng)
    elif kind == "cheb":
        p[f"{prefix}weight0"] = ad.glorot(d_in, out_dim, rng)
        p[f"{prefix}weight1"] = ad.glorot(d_in, out_dim, rng)
    elif kind == "sage":
        p[f"{prefix}weight"] = ad.glorot(2 * d_in, out_dim, rng)
    elif kind == "arma":
        p[f"{prefix}weight"] = ad.glorot(d_in, out_dim, rng)
        p[f"{prefix}root"] = ad.glorot(d_in, out_dim, rng)
    elif kind in ("gcn", "sg", "linear"):
        p[f"{prefix}weight"] = ad.glorot(d_in, out_dim, rng)
    else:
        raise ValueError(f"unknown convolution {kind!r}")
    p[f"{prefix}bias"] = ad.zeros_param(1, out_dim)
    return p


def micro_conv_forward(kind: str, h: Tensor, graph: Graph, params: dict, out_dim: int,
                       prefix: str = "") -> Tensor:
    if kind == "zero":
        return ad.zeros(h.shape[0], out_dim, dtype=h.data.dtype)
    if kind not in CONVS:
        raise ValueError(f"unknown convolution {kind!r}")
    w = params.get(f"{prefix}weight")
    if kind.startswith("gat"):
        k = _gat_heads(kind)
        index = graph.edge_index(self_loops=True)
        z = ad.matmul(h, w)
        coeff = attention_coefficients("gat", z, index, k, params[f"{prefix}att_l"],
                                       params[f"{prefix}att_r"])
        out = ad.matmul(ad.propagate(coeff, z, index, "sum"), params[f"{prefix}proj"])
    elif kind == "gcn":
        out = ad.spmm(graph.norm_adjacency("gcn"), ad.matmul(h, w))
    elif kind == "cheb":
        # scaled Laplacian with lambda_max = 2: L~ = -D^-1/2 A D^-1/2
        lx = ad.scale(ad.spmm(graph.norm_adjacency("sym"), h), -1.0)
        out = ad.add(ad.matmul(h, params[f"{prefix}weight0"]),
                     ad.matmul(lx, params[f"{prefix}weight1"]))
    elif kind == "sage":
        neigh = ad.spmm(graph.norm_adjacency("mean"), h)
        out = ad.matmul(ad.concat_cols(h, neigh), w)
    elif kind == "arma":
        prop = ad.spmm(graph.norm_adjacency("gcn"), ad.matmul(h, w))
        out = ad.activation("relu", ad.add(prop, ad.matmul(h, params[f"{prefix}root"])))
    elif kind == "sg":
        adj = graph.norm_adjacency("gcn")
        out = ad.spmm(adj, ad.spmm(adj, ad.matmul(h, w)))
    else:  # linear
        out = ad.matmul(h, w)
    return ad.add(out, params[f"{prefix}bias"])


def combine(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return ad.add(a, b)
    if kind == "product":
        return ad.mul(a, b)
    if kind == "concat":
        return ad.concat_cols(a, b)
    raise ValueError(f"unknown combine scheme {kind!r}")


def build_micro_model(cfg: MicroCellConfig, dataset, rng: np.random.Generator | int = 0) -> GNNModel:
    """Two-convolution cell plus a linear classifier.

    Parallel wiring feeds the input to both convolutions; stacked wiring
    feeds the first convolution's output to the second.  Dropout at the
    cell's rate is applied to the input and to the combined representation.
    """
    rng = np.random.default_rng(rng)
    num_features, num_classes = _meta(dataset)
    hu = cfg.hidden_units
    params = ModelParams()
    params.update(init_conv(cfg.conv1, num_features, hu, rng, "c1."))
    d2 = num_features if cfg.wiring == "parallel" else hu
    params.update(init_conv(cfg.conv2, d2, hu, rng, "c2."))
    params["cls.weight"] = ad.glorot(cfg.combined_width, num_classes, rng)
    params["cls.bias"] = ad.zeros_param(1, num_classes)

    def forward(graph, training, drop_rng):
        x = ad.dropout(Tensor(graph.features), cfg.dropout, training, drop_rng)
        c1 = micro_conv_forward(cfg.conv1, x, graph, params, hu, "c1.")
        c2_in = x if cfg.wiring == "parallel" else c1
        c2 = micro_conv_forward(cfg.conv2, c2_in, graph, params, hu, "c2.")
        z = ad.activation(cfg.act, combine(cfg.comb, c1, c2))
        z = ad.dropout(z, cfg.dropout, training, drop_rng)
        return ad.add(ad.matmul(z, params["cls.weight"]), params["cls.bias"])

    return GNNModel(params, forward, "micro")
