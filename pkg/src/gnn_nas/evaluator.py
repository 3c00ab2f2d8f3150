"""Train one architecture and report how well it did."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import space as S
from .graph import Graph
from .layers import GNNModel, MACRO_DROPOUT, build_macro_model

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 4
DEFAULT_BUDGET_BYTES = 12 * 1024 ** 3


@dataclass
class TrainConfig:
    max_epochs: int = 300
    patience: int = 100
    lr: float = 0.005
    dropout: float = MACRO_DROPOUT
    weight_decay: float = 5e-4
    seed: int = 0
    gcn_sqrt: bool = False

    def __post_init__(self):
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")


@dataclass(frozen=True)
class MemoryBudget:
    max_bytes: int = DEFAULT_BUDGET_BYTES

    def __post_init__(self):
        if self.max_bytes <= 0:
            raise ValueError("memory budget must be positive")


@dataclass
class EvalRecord:
    genome: S.Genome
    val_acc: float
    test_acc: float = 0.0
    param_count: int = 0
    est_bytes: int = 0
    oom: bool = False
    epochs_run: int = 0
    seconds: float = 0.0
    error: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.val_acc <= 1.0 and 0.0 <= self.test_acc <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")
        if self.oom and (self.val_acc != 0.0 or self.epochs_run != 0):
            raise ValueError("out-of-budget records carry no accuracy and no epochs")

    @property
    def fitness(self) -> float:
        return self.val_acc

    def to_json(self, iteration: int) -> dict:
        out = {"iter": iteration, "genome": S.to_json(self.genome), "val_acc": self.val_acc,
               "test_acc": self.test_acc, "params": self.param_count, "oom": self.oom,
               "seconds": self.seconds, "est_bytes": self.est_bytes,
               "epochs": self.epochs_run}
        if self.error:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        return cls(genome=S.from_json(obj["genome"]), val_acc=obj["val_acc"],
                   test_acc=obj.get("test_acc", 0.0), param_count=obj.get("params", 0),
                   est_bytes=obj.get("est_bytes", 0), oom=obj.get("oom", False),
                   epochs_run=obj.get("epochs", 0), seconds=obj.get("seconds", 0.0),
                   error=obj.get("error"))


# ---------------------------------------------------------------------------
# analytic sizes
# ---------------------------------------------------------------------------

_ATT_VECTORS = {"const": 0, "gcn": 0, "gat": 2, "sym-gat": 2, "cos": 2, "linear": 1,
                "gen_linear": 3}


def _macro_layer_params(d_in: int, att: str, heads: int, dim: int, agg: str) -> int:
    width = heads * dim
    count = d_in * width + width + _ATT_VECTORS[att] * width
    if agg == "mlp":
        count += dim * dim + dim
    return count


def _conv_params(kind: str, d_in: int, out: int) -> int:
    if kind == "zero":
        return 0
    if kind.startswith("gat"):
        k = int(kind[3:])
        return d_in * k * out + 2 * k * out + k * out * out + out
    if kind in ("cheb", "sage", "arma"):
        return 2 * d_in * out + out
    return d_in * out + out


def _dims(dataset) -> tuple[int, int, int, int]:
    return dataset.num_nodes, dataset.num_edges, dataset.num_features, dataset.num_classes


def count_params(genome: S.Genome, dataset) -> int:
    """Trainable scalar count of ``genome`` instantiated on ``dataset``."""
    _, _, f, c = _dims(dataset)
    if genome.kind == "macro":
        l1, l2 = S.macro_configs(genome)
        return (_macro_layer_params(f, l1.att, l1.heads, l1.dim, l1.agg)
                + _macro_layer_params(l1.width, l2.att, 1, c, l2.agg))
    cfg = S.micro_config(genome)
    hu = cfg.hidden_units
    d2 = f if cfg.wiring == "parallel" else hu
    return (_conv_params(cfg.conv1, f, hu) + _conv_params(cfg.conv2, d2, hu)
            + cfg.combined_width * c + c)


def memory_terms(genome: S.Genome, dataset) -> dict:
    """Value counts behind :func:`estimate_memory`.

    ``activations`` lists ``2 * n * width`` per layer (values plus their
    gradients); ``edges`` lists ``E * heads`` per attention layer.
    """
    n, e, f, c = _dims(dataset)
    acts, edge_terms = [], []
    if genome.kind == "macro":
        l1, _ = S.macro_configs(genome)
        acts = [2 * n * l1.width, 2 * n * c]
        edge_terms = [e * l1.heads, e * 1]
    else:
        cfg = S.micro_config(genome)
        for conv in (cfg.conv1, cfg.conv2):
            # a zero convolution emits a constant and stores nothing
            acts.append(0 if conv == "zero" else 2 * n * cfg.hidden_units)
            if conv.startswith("gat"):
                edge_terms.append(e * int(conv[3:]))
        acts.append(2 * n * c)
    return {"params": count_params(genome, dataset), "activations": acts, "edges": edge_terms}


def estimate_memory(genome: S.Genome, dataset) -> int:
    """Closed-form training footprint in bytes.

    ``4 * (3 * params + sum_layers 2 * n * width + sum_attention_layers E * heads)``:
    weights with two Adam moments, activations with their gradients, and one
    coefficient per edge and head.
    """
    t = memory_terms(genome, dataset)
    return BYTES_PER_VALUE * (3 * t["params"] + sum(t["activations"]) + sum(t["edges"]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def accuracy(logits, labels: np.ndarray, mask: np.ndarray) -> float:
    """Arg-max match rate over ``mask``; ties resolve to the lowest class."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(np.argmax(data[rows], axis=1) == np.asarray(labels)[rows]))


@dataclass
class EarlyStopping:
    """Track the best validation accuracy; ties go to the lower loss."""

    patience: int
    best_acc: float = -math.inf
    best_loss: float = math.inf
    best_epoch: int = 0

    def update(self, epoch: int, acc: float, loss: float) -> bool:
        if acc > self.best_acc or (acc == self.best_acc and loss < self.best_loss):
            self.best_acc, self.best_loss, self.best_epoch = acc, loss, epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(drop_ss)


def _hyperparameters(genome: S.Genome, cfg: TrainConfig) -> tuple[float, float]:
    if genome.kind == "micro":
        m = S.micro_config(genome)
        return m.lr, m.weight_decay
    return cfg.lr, cfg.weight_decay


def build(genome: S.Genome, graph: Graph, cfg: TrainConfig,
          init_rng: np.random.Generator) -> GNNModel:
    if genome.kind == "macro":
        return build_macro_model(S.macro_configs(genome), graph, init_rng,
                                 dropout=cfg.dropout, gcn_sqrt=cfg.gcn_sqrt)
    return S.build_model(genome, graph, init_rng)


def fit(genome: S.Genome, graph: Graph, cfg: TrainConfig | None = None,
        budget: MemoryBudget | None = None) -> tuple[EvalRecord, GNNModel | None]:
    """Train ``genome`` and return its record plus the model at its best epoch."""
    cfg = cfg or TrainConfig()
    budget = budget or MemoryBudget()
    if not graph.train_mask.any() or not graph.valid_mask.any():
        raise ValueError("graph needs nonempty train and valid masks")
    start = time.perf_counter()
    est = estimate_memory(genome, graph)
    n_params = count_params(genome, graph)
    if est > budget.max_bytes:
        return EvalRecord(genome, 0.0, 0.0, n_params, est, oom=True,
                          seconds=time.perf_counter() - start), None

    init_rng, drop_rng = _seeds(cfg.seed)
    model = build(genome, graph, cfg, init_rng)
    lr, wd = _hyperparameters(genome, cfg)
    opt = ad.AdamState(learning_rate=lr, weight_decay=wd)
    params = model.params.tensors()
    stopper = EarlyStopping(cfg.patience)
    best = model.params.snapshot()
    labels = graph.labels

    def failed(epoch: int, why: str) -> tuple[EvalRecord, None]:
        log.warning("%s: %s at epoch %d", S.pretty(genome), why, epoch)
        return EvalRecord(genome, 0.0, 0.0, n_params, est, epochs_run=epoch,
                          seconds=time.perf_counter() - start, error=why), None

    epoch = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            with ad.Tape():
                logits = model.forward(graph, training=True, rng=drop_rng)
                loss = ad.cross_entropy(logits, labels, graph.train_mask)
                if not np.isfinite(loss.item()):
                    return failed(epoch, "non-finite training loss")
                ad.backward(loss)
            ad.adam_step(opt, params)

            out = model.forward(graph, training=False)
            if not np.all(np.isfinite(out.data)):
                return failed(epoch, "non-finite logits")
            val_loss = ad.cross_entropy(out, labels, graph.valid_mask).item()
            if stopper.update(epoch, accuracy(out, labels, graph.valid_mask), val_loss):
                best = model.params.snapshot()
            if stopper.should_stop(epoch):
                break

    model.params.restore(best)
    out = model.forward(graph, training=False)
    val_acc = accuracy(out, labels, graph.valid_mask)
    test_acc = accuracy(out, labels, graph.test_mask) if graph.test_mask.any() else 0.0
    record = EvalRecord(genome, val_acc, test_acc, n_params, est, epochs_run=epoch,
                        seconds=time.perf_counter() - start)
    return record, model


def train_and_evaluate(genome: S.Genome, graph: Graph, cfg: TrainConfig | None = None,
                       budget: MemoryBudget | None = None) -> EvalRecord:
    return fit(genome, graph, cfg, budget)[0]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
