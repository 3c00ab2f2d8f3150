import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnn_nas import layers as L
from gnn_nas import space as S


def test_macro_sizes():
    assert S.space_size("macro", per_layer=True) == 9408
    assert S.space_size("macro") == 9408 ** 2 == 88_510_464


def test_micro_size_is_product_of_option_lists():
    want = math.prod(len(o) for o in (L.CONVS, L.CONVS, L.WIRINGS, L.COMBINES,
                                      L.MICRO_ACTIVATIONS, L.LEARNING_RATES, L.DROPOUTS,
                                      L.WEIGHT_DECAYS, L.HIDDEN_UNITS))
    assert S.space_size("micro") == want == 8_505_000
    report = S.micro_size_report()
    assert "8,505,000" in report and "3,543,750" in report


def test_reference_micro_count_reconstruction():
    # 15*15 convs, 3 combines, 5 activations, 3 rates, 10 dropouts, 5 decays, 7 widths
    assert 15 * 15 * 3 * 5 * 3 * 10 * 5 * 7 == S.REFERENCE_MICRO_SIZE


def test_per_layer_only_for_macro():
    with pytest.raises(ValueError):
        S.space_size("micro", per_layer=True)
    with pytest.raises(ValueError):
        S.get_space("mesa")


def test_genome_validation():
    with pytest.raises(ValueError):
        S.Genome(S.MACRO, (0,) * 9)
    with pytest.raises(ValueError):
        S.Genome(S.MACRO, (7,) + (0,) * 9)


def test_pretty_and_json():
    g = S.Genome(S.MACRO, (2, 1, 0, 4, 5, 4, 0, 1, 2, 0))
    assert S.pretty(g) == "macro[gat,4,sum,64,relu|cos,2,mean,16,tanh]"
    assert S.from_json(S.to_json(g)) == g
    m = S.Genome(S.MICRO, (0, 8, 1, 2, 3, 1, 5, 3, 6))
    assert S.pretty(m) == "micro[gat1,gcn,stacked,concat,relu|0.001,0.5,0.0005,512]"
    assert S.from_json(S.to_json(m)) == m
    with pytest.raises(ValueError):
        S.from_json({"space": "macro", "slots": dict(S.to_json(g)["slots"], att_1="bogus")})


def test_mutation_examples():
    rng = np.random.default_rng(0)
    g = S.sample_uniform("macro", rng)
    for _ in range(200):
        child = S.mutate(g, rng)
        assert S.hamming(g, child) == 1


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["macro", "micro"]), st.integers(0, 2 ** 32 - 1))
def test_sample_and_mutate_valid(kind, seed):
    rng = np.random.default_rng(seed)
    g = S.sample_uniform(kind, rng)
    for slot, i in zip(g.space.slots, g.indices):
        assert 0 <= i < len(slot)
    child = S.mutate(g, rng)
    assert S.hamming(g, child) == 1
    assert S.decode(kind, S.encode(child)) == child


def test_mutation_uniform_over_slots_and_values():
    rng = np.random.default_rng(1)
    g = S.Genome(S.MACRO, (0,) * 10)
    slots = np.zeros(10)
    values = np.zeros(len(L.ATTENTIONS))
    n = 20000
    for _ in range(n):
        c = S.mutate(g, rng)
        k = next(i for i in range(10) if c.indices[i] != 0)
        slots[k] += 1
        if k == 0:
            values[c.indices[0]] += 1
    # binomial sd at p=0.1 is sqrt(n*.1*.9) ~ 42
    assert np.all(np.abs(slots - n / 10) < 200)
    assert values[0] == 0
    expect = slots[0] / 6
    assert np.all(np.abs(values[1:] - expect) < 5 * np.sqrt(expect))


def test_sample_uniform_marginals():
    rng = np.random.default_rng(2)
    draws = np.array([S.sample_uniform("macro", rng).indices for _ in range(12000)])
    counts = np.bincount(draws[:, 1], minlength=len(L.HEADS))
    assert np.all(np.abs(counts - 2000) < 200)


def test_sampling_deterministic():
    a = [S.sample_uniform("micro", np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
