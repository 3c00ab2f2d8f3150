"""Search spaces, genomes, and the operators the strategies apply to them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class Slot:
    name: str
    options: tuple

    def __len__(self):
        return len(self.options)


@dataclass(frozen=True)
class SpaceDescriptor:
    kind: str
    slots: tuple[Slot, ...]

    def __len__(self):
        return len(self.slots)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def option_counts(self) -> list[int]:
        return [len(s) for s in self.slots]


def _macro_layer_slots(layer: int) -> list[Slot]:
    return [Slot(f"att_{layer}", L.ATTENTIONS), Slot(f"heads_{layer}", L.HEADS),
            Slot(f"agg_{layer}", L.MACRO_AGGREGATORS), Slot(f"dim_{layer}", L.DIMS),
            Slot(f"act_{layer}", L.MACRO_ACTIVATIONS)]


MACRO = SpaceDescriptor("macro", tuple(_macro_layer_slots(1) + _macro_layer_slots(2)))
MICRO = SpaceDescriptor("micro", (
    Slot("conv1", L.CONVS), Slot("conv2", L.CONVS), Slot("wiring", L.WIRINGS),
    Slot("comb", L.COMBINES), Slot("act", L.MICRO_ACTIVATIONS), Slot("lr", L.LEARNING_RATES),
    Slot("do", L.DROPOUTS), Slot("wd", L.WEIGHT_DECAYS), Slot("hu", L.HIDDEN_UNITS),
))
SPACES = {"macro": MACRO, "micro": MICRO}

# Count quoted alongside Table-2-style option lists without a wiring gene and
# with five weight-decay values.
REFERENCE_MICRO_SIZE = 3_543_750


def get_space(kind: str | SpaceDescriptor) -> SpaceDescriptor:
    if isinstance(kind, SpaceDescriptor):
        return kind
    try:
        return SPACES[kind]
    except KeyError:
        raise ValueError(f"unknown search space {kind!r}") from None


@dataclass(frozen=True)
class Genome:
    space: SpaceDescriptor
    indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.space):
            raise ValueError(f"{self.space.kind} genomes have {len(self.space)} slots")
        for slot, i in zip(self.space.slots, self.indices):
            if not 0 <= i < len(slot):
                raise ValueError(f"index {i} out of range for slot {slot.name!r}")

    @property
    def kind(self) -> str:
        return self.space.kind

    def values(self) -> list:
        return [s.options[i] for s, i in zip(self.space.slots, self.indices)]

    def as_dict(self) -> dict:
        return dict(zip(self.space.names, self.values()))

    def __str__(self):
        return pretty(self)


def space_size(space, per_layer: bool = False) -> int:
    """Number of distinct genomes.  ``per_layer`` only applies to macro."""
    space = get_space(space)
    counts = space.option_counts
    if per_layer:
        if space.kind != "macro":
            raise ValueError("per-layer size is defined for the macro space only")
        counts = counts[: len(counts) // 2]
    return math.prod(counts)


def micro_size_report() -> str:
    implemented = space_size(MICRO)
    no_wiring = implemented // len(L.WIRINGS)
    return (f"micro space size: {implemented:,} implemented (wiring x{len(L.WIRINGS)}); "
            f"{no_wiring:,} without the wiring gene; "
            f"reference count {REFERENCE_MICRO_SIZE:,} assumes 5 weight-decay options "
            f"and no wiring gene")


def sample_uniform(space, rng: np.random.Generator) -> Genome:
    space = get_space(space)
    return Genome(space, tuple(int(rng.integers(len(s))) for s in space.slots))


def mutate(g: Genome, rng: np.random.Generator) -> Genome:
    """Replace one uniformly chosen slot by a different uniformly chosen option."""
    slot = int(rng.integers(len(g.space)))
    count = len(g.space.slots[slot])
    if count < 2:
        raise ValueError(f"slot {g.space.slots[slot].name!r} cannot mutate")
    new = int(rng.integers(count - 1))
    if new >= g.indices[slot]:
        new += 1
    idx = list(g.indices)
    idx[slot] = new
    return Genome(g.space, tuple(idx))


def hamming(a: Genome, b: Genome) -> int:
    return sum(x != y for x, y in zip(a.indices, b.indices))


def encode(g: Genome) -> list[int]:
    return list(g.indices)


def decode(space, seq: Sequence[int]) -> Genome:
    return Genome(get_space(space), tuple(int(i) for i in seq))


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------

def macro_configs(g: Genome) -> tuple[L.MacroLayerConfig, L.MacroLayerConfig]:
    if g.kind != "macro":
        raise ValueError("not a macro genome")
    v = g.values()
    return L.MacroLayerConfig(*v[:5]), L.MacroLayerConfig(*v[5:])


def micro_config(g: Genome) -> L.MicroCellConfig:
    if g.kind != "micro":
        raise ValueError("not a micro genome")
    return L.MicroCellConfig(*g.values())


def build_model(g: Genome, dataset, rng=0, gcn_sqrt: bool = False) -> L.GNNModel:
    if g.kind == "macro":
        return L.build_macro_model(macro_configs(g), dataset, rng, gcn_sqrt=gcn_sqrt)
    return L.build_micro_model(micro_config(g), dataset, rng)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def pretty(g: Genome) -> str:
    """Canonical one-line form, e.g. ``macro[gat,4,sum,64,relu|cos,2,mean,16,tanh]``."""
    v = [_fmt(x) for x in g.values()]
    if g.kind == "macro":
        return f"macro[{','.join(v[:5])}|{','.join(v[5:])}]"
    return f"micro[{','.join(v[:5])}|{','.join(v[5:])}]"


def to_json(g: Genome) -> dict:
    return {"space": g.kind, "slots": {n: _fmt(v) for n, v in zip(g.space.names, g.values())}}


def from_json(obj: dict | str) -> Genome:
    if isinstance(obj, str):
        obj = json.loads(obj)
    space = get_space(obj["space"])
    idx = []
    for slot in space.slots:
        text = str(obj["slots"][slot.name])
        matches = [i for i, o in enumerate(slot.options) if _fmt(o) == text]
        if not matches:
            raise ValueError(f"unknown option {text!r} for slot {slot.name!r}")
        idx.append(matches[0])
    return Genome(space, tuple(idx))
