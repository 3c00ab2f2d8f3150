"""Neural architecture search for graph neural networks on CPU."""

from .evaluator import EvalRecord, MemoryBudget, TrainConfig, train_and_evaluate
from .graph import Graph, generate_synthetic, load_graph, split_last_n
from .space import MACRO, MICRO, Genome, space_size
from .strategies import run_strategy

__all__ = ["EvalRecord", "MemoryBudget", "TrainConfig", "train_and_evaluate", "Graph",
           "generate_synthetic", "load_graph", "split_last_n", "MACRO", "MICRO", "Genome",
           "space_size", "run_strategy"]
__version__ = "0.1.0"
