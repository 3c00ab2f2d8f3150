"""Random search, aging evolution and a recurrent policy-gradient controller.

All three strategies share one contract: a ``*_step`` function proposes a
single genome, calls the evaluation oracle exactly once, updates its own
state and returns a :class:`StrategyStep`.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import space as S
from .evaluator import EvalRecord, MemoryBudget, TrainConfig, train_and_evaluate
from .graph import Graph

log = logging.getLogger(__name__)

STRATEGIES = ("rs", "ea", "rl")

Oracle = Callable[[S.Genome], EvalRecord]


@dataclass
class StrategyStep:
    iteration: int
    genome: S.Genome
    record: EvalRecord


# ---------------------------------------------------------------------------
# random search
# ---------------------------------------------------------------------------

@dataclass
class RSState:
    best: S.Genome | None = None
    best_acc: float = -math.inf
    iteration: int = 0


def rs_step(state: RSState, space, rng: np.random.Generator, evaluate: Oracle) -> StrategyStep:
    genome = S.sample_uniform(space, rng)
    record = evaluate(genome)
    state.iteration += 1
    if record.fitness > state.best_acc:
        state.best, state.best_acc = genome, record.fitness
    return StrategyStep(state.iteration, genome, record)


# ---------------------------------------------------------------------------
# aging evolution
# ---------------------------------------------------------------------------

@dataclass
class Member:
    genome: S.Genome
    fitness: float
    birth: int


@dataclass
class EAState:
    """Age-ordered population: index 0 is the oldest member."""

    capacity: int = 100
    tournament: int = 3
    population: deque = field(default_factory=deque)
    iteration: int = 0

    def __post_init__(self):
        if self.capacity < 1 or not 1 <= self.tournament <= self.capacity:
            raise ValueError("need 1 <= tournament <= capacity")

    @property
    def fitnesses(self) -> list[float]:
        return [m.fitness for m in self.population]

    def ages(self) -> list[int]:
        newest = self.population[-1].birth
        return [newest - m.birth for m in self.population]


def tournament_select(state: EAState, rng: np.random.Generator) -> int:
    """Index of the fittest among ``k`` members drawn without replacement.

    Ties go to the youngest contender.
    """
    pop = state.population
    k = min(state.tournament, len(pop))
    picks = rng.choice(len(pop), size=k, replace=False)
    return int(max(picks, key=lambda i: (pop[i].fitness, i)))


def ea_step(state: EAState, space, rng: np.random.Generator, evaluate: Oracle) -> StrategyStep:
    state.iteration += 1
    if len(state.population) < state.capacity:
        genome = S.sample_uniform(space, rng)
    else:
        parent = state.population[tournament_select(state, rng)]
        genome = S.mutate(parent.genome, rng)
    record = evaluate(genome)
    state.population.append(Member(genome, record.fitness, state.iteration))
    if len(state.population) > state.capacity:
        state.population.popleft()
    return StrategyStep(state.iteration, genome, record)


# ---------------------------------------------------------------------------
# recurrent controller
# ---------------------------------------------------------------------------

CONTROLLER_HIDDEN = 100
CONTROLLER_LR = 3.5e-4
BASELINE_DECAY = 0.9
CONTROLLER_INIT = 0.1


def _uniform(rng, rows, cols, name):
    data = rng.uniform(-CONTROLLER_INIT, CONTROLLER_INIT, size=(rows, cols))
    return ad.Tensor(data.astype(np.float32), requires_grad=True, name=name)


@dataclass
class ControllerState:
    """One-layer LSTM that emits one option per slot, left to right.

    The input at slot ``t`` is the embedding of the option chosen at slot
    ``t - 1`` (a learned start vector at ``t = 0``).
    """

    space: S.SpaceDescriptor
    params: dict
    optimizer: ad.AdamState
    hidden: int = CONTROLLER_HIDDEN
    baseline: float | None = None
    decay: float = BASELINE_DECAY
    updates: int = 0

    @classmethod
    def create(cls, space, rng: np.random.Generator | int = 0, hidden: int = CONTROLLER_HIDDEN,
               lr: float = CONTROLLER_LR, decay: float = BASELINE_DECAY) -> "ControllerState":
        space = S.get_space(space)
        rng = np.random.default_rng(rng)
        h = hidden
        p = {"start": _uniform(rng, 1, h, "start"),
             "lstm.w": _uniform(rng, 2 * h, 4 * h, "lstm.w"),
             "lstm.b": _uniform(rng, 1, 4 * h, "lstm.b")}
        for t, slot in enumerate(space.slots):
            p[f"out{t}.w"] = _uniform(rng, h, len(slot), f"out{t}.w")
            p[f"out{t}.b"] = _uniform(rng, 1, len(slot), f"out{t}.b")
            if t + 1 < len(space.slots):
                p[f"emb{t}"] = _uniform(rng, len(slot), h, f"emb{t}")
        return cls(space, p, ad.AdamState(learning_rate=lr), hidden=h, decay=decay)

    def tensors(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def lstm_cell(x: ad.Tensor, h: ad.Tensor, c: ad.Tensor, w: ad.Tensor,
              b: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Standard gated cell; gate blocks are ordered input, forget, cell, output."""
    n = h.shape[1]
    gates = ad.add(ad.matmul(ad.concat_cols(x, h), w), b)
    i = ad.activation("sigmoid", ad.slice_cols(gates, 0, n))
    f = ad.activation("sigmoid", ad.slice_cols(gates, n, 2 * n))
    g = ad.activation("tanh", ad.slice_cols(gates, 2 * n, 3 * n))
    o = ad.activation("sigmoid", ad.slice_cols(gates, 3 * n, 4 * n))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.activation("tanh", c_new))
    return h_new, c_new


def _unroll(state: ControllerState, choose: Callable[[int, ad.Tensor], int]) -> list[ad.Tensor]:
    """Run the cell over all slots; ``choose(t, logits)`` fixes each option."""
    p = state.params
    h = ad.zeros(1, state.hidden)
    c = ad.zeros(1, state.hidden)
    x = p["start"]
    all_logits = []
    for t in range(len(state.space)):
        h, c = lstm_cell(x, h, c, p["lstm.w"], p["lstm.b"])
        logits = ad.add(ad.matmul(h, p[f"out{t}.w"]), p[f"out{t}.b"])
        all_logits.append(logits)
        choice = choose(t, logits)
        if t + 1 < len(state.space):
            x = ad.gather_rows(p[f"emb{t}"], np.array([choice]))
    return all_logits


def slot_probabilities(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over one slot; ``temperature == 0`` puts all mass on the argmax."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if temperature == 0:
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    return np.exp(ad.log_softmax_rows((z / temperature)[None, :])[0])


@dataclass
class ControllerSample:
    genome: S.Genome
    log_probs: np.ndarray


def rl_sample(state: ControllerState, space, rng: np.random.Generator,
              temperature: float = 1.0) -> ControllerSample:
    """Draw one genome autoregressively; the parameters are not modified."""
    if S.get_space(space) != state.space:
        raise ValueError("controller was built for a different space")
    choices: list[int] = []
    log_probs: list[float] = []

    def choose(t, logits):
        probs = slot_probabilities(logits.data, temperature)
        k = int(rng.choice(len(probs), p=probs))
        choices.append(k)
        log_probs.append(float(np.log(probs[k])) if probs[k] > 0 else -math.inf)
        return k

    _unroll(state, choose)
    return ControllerSample(S.Genome(state.space, tuple(choices)), np.array(log_probs))


def sequence_log_prob(state: ControllerState, genome: S.Genome) -> ad.Tensor:
    """Differentiable ``sum_t log p(choice_t)`` with the given choices forced."""
    logits = _unroll(state, lambda t, _: genome.indices[t])
    terms = [ad.cross_entropy(lg, np.array([k])) for lg, k in zip(logits, genome.indices)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0)


def rl_update(state: ControllerState, sample: ControllerSample, reward: float) -> float:
    """One policy-gradient step against the moving-average baseline.

    Returns the advantage used.  A zero advantage leaves every parameter
    (and the optimizer moments) untouched.
    """
    if not math.isfinite(reward):
        raise ValueError(f"non-finite reward {reward}")
    if state.baseline is None:
        state.baseline = float(reward)
    advantage = float(reward) - state.baseline
    if advantage != 0.0:
        with ad.Tape():
            loss = ad.scale(sequence_log_prob(state, sample.genome), -advantage)
            ad.backward(loss)
        ad.adam_step(state.optimizer, state.tensors())
    state.baseline = state.decay * state.baseline + (1 - state.decay) * float(reward)
    state.updates += 1
    return advantage


@dataclass
class RLState:
    controller: ControllerState
    temperature: float = 1.0
    iteration: int = 0


def rl_step(state: RLState, space, rng: np.random.Generator, evaluate: Oracle) -> StrategyStep:
    sample = rl_sample(state.controller, space, rng, state.temperature)
    record = evaluate(sample.genome)
    rl_update(state.controller, sample, record.fitness)
    state.iteration += 1
    return StrategyStep(state.iteration, sample.genome, record)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    strategy: str
    seed: int
    records: list[EvalRecord]
    best: EvalRecord | None

    @property
    def best_genome(self) -> S.Genome | None:
        return None if self.best is None else self.best.genome


def eval_seed(seed: int, iteration: int) -> int:
    """Training seed for one iteration of one run."""
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def make_state(kind: str, space, seed: int, population: int = 100, tournament: int = 3):
    if kind == "rs":
        return RSState()
    if kind == "ea":
        return EAState(capacity=population, tournament=tournament)
    if kind == "rl":
        ctrl_ss = np.random.SeedSequence([seed, 1])
        return RLState(ControllerState.create(space, np.random.default_rng(ctrl_ss)))
    raise ValueError(f"unknown strategy {kind!r}; choose from {STRATEGIES}")


STEPS = {"rs": rs_step, "ea": ea_step, "rl": rl_step}


def run_strategy(kind: str, space, graph: Graph | None, iterations: int = 1000, seed: int = 0,
                 eval_config: TrainConfig | None = None, budget: MemoryBudget | None = None,
                 trace_path: str | Path | None = None, evaluate: Callable | None = None,
                 state=None) -> SearchResult:
    """Run ``iterations`` proposals of one strategy.

    Args:
        kind: ``"rs"``, ``"ea"`` or ``"rl"``.
        graph: dataset to train on; unused when ``evaluate`` is given.
        eval_config: training settings; its seed is replaced per iteration.
        trace_path: if set, one JSON line per iteration is written here.
        evaluate: ``(genome, iteration) -> EvalRecord`` replacing training.
        state: pre-built strategy state (defaults to a fresh one for ``kind``).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    space = S.get_space(space)
    state = state if state is not None else make_state(kind, space, seed)
    step = STEPS[kind]
    cfg = eval_config or TrainConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    counter = {"it": 0}

    def oracle(genome: S.Genome) -> EvalRecord:
        it = counter["it"]
        if evaluate is not None:
            return evaluate(genome, it)
        return train_and_evaluate(genome, graph, replace(cfg, seed=eval_seed(seed, it)), budget)

    records: list[EvalRecord] = []
    best: EvalRecord | None = None
    sink = open(trace_path, "w") if trace_path is not None else None
    try:
        for it in range(1, iterations + 1):
            counter["it"] = it
            t0 = time.perf_counter()
            result = step(state, space, rng, oracle)
            if result.iteration != it:
                raise RuntimeError("strategy iteration counter out of sync")
            rec = result.record
            records.append(rec)
            if best is None or rec.fitness > best.fitness:
                best = rec
            if sink is not None:
                sink.write(json.dumps(rec.to_json(it)) + "\n")
                sink.flush()
            log.debug("%s seed %d iter %d: %.3f %s (%.2fs)", kind, seed, it, rec.val_acc,
                      S.pretty(rec.genome), time.perf_counter() - t0)
    finally:
        if sink is not None:
            sink.close()
    return SearchResult(kind, seed, records, best)
