import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnn_nas import layers as L
from gnn_nas import space as S
from gnn_nas.evaluator import (EarlyStopping, EvalRecord, MemoryBudget, TrainConfig, accuracy,
                               estimate_memory, fit, memory_terms, train_and_evaluate)
from gnn_nas.graph import from_arrays, generate_synthetic


def micro(**slots):
    base = dict(conv1="gcn", conv2="zero", wiring="parallel", comb="add", act="relu",
                lr="0.01", do="0", wd="0", hu="16")
    base.update(slots)
    return S.from_json({"space": "micro", "slots": base})


def macro(**slots):
    base = dict(att_1="gat", heads_1="2", agg_1="sum", dim_1="8", act_1="elu",
                att_2="gat", heads_2="2", agg_2="sum", dim_2="8", act_2="linear")
    base.update(slots)
    return S.from_json({"space": "macro", "slots": base})


@pytest.fixture(scope="module")
def two_cliques():
    n = 20
    half = n // 2
    edges = [(i, j) for i in range(half) for j in range(i + 1, half)]
    edges += [(i, j) for i in range(half, n) for j in range(i + 1, n)]
    labels = (np.arange(n) >= half).astype(int)
    feats = np.random.default_rng(0).random((n, 4)).astype(np.float32)
    train = np.isin(np.arange(n), [0, 1, 10, 11])
    valid = np.isin(np.arange(n), [2, 3, 4, 5, 12, 13, 14, 15])
    test = ~(train | valid)
    return from_arrays(n, edges, feats, labels, 2, train, valid, test)


@pytest.fixture(scope="module")
def sbm():
    return generate_synthetic(120, 3, 6, 0.15, 0.01, 0.8, seed=1)


def test_two_cliques_gcn_separable(two_cliques):
    rec = train_and_evaluate(micro(conv1="gcn", hu="16"), two_cliques,
                             TrainConfig(max_epochs=50, patience=50))
    assert rec.val_acc == 1.0
    assert rec.epochs_run <= 50


def test_one_byte_budget_is_oom(two_cliques):
    rec, model = fit(macro(), two_cliques, TrainConfig(), MemoryBudget(1))
    assert rec.oom and rec.val_acc == 0.0 and rec.epochs_run == 0 and model is None
    assert rec.fitness == 0.0


def test_memory_zero_conv_hand_count(two_cliques):
    # 4 * (3 * (16*2 + 2) + 2 * 20 * 2) with both convolutions zero
    g = micro(conv1="zero", conv2="zero", hu="16")
    assert estimate_memory(g, two_cliques) == 4 * (3 * 34 + 80) == 728


def test_memory_gat_micro_hand_count(two_cliques):
    # gat2 4->8: 4*16 weight + 2*16 attention + 16*8 proj + 8 bias = 232; classifier 8*2+2
    g = micro(conv1="gat2", conv2="zero", hu="8")
    n, e = two_cliques.num_nodes, two_cliques.num_edges
    params = 232 + 18
    assert memory_terms(g, two_cliques)["params"] == params
    assert estimate_memory(g, two_cliques) == 4 * (3 * params + 2 * n * 8 + 2 * n * 2 + e * 2)


def test_memory_activation_linear_in_heads(sbm):
    a = memory_terms(macro(heads_1="4"), sbm)
    b = memory_terms(macro(heads_1="8"), sbm)
    assert b["activations"][0] == 2 * a["activations"][0]
    assert b["edges"][0] == 2 * a["edges"][0]
    assert b["activations"][1] == a["activations"][1]


def test_memory_deterministic(sbm):
    g = macro(heads_1="64", dim_1="256")
    assert estimate_memory(g, sbm) == estimate_memory(g, sbm)


def test_early_stopping_patience_arithmetic():
    stop = EarlyStopping(100)
    for epoch in range(1, 301):
        acc = min(epoch, 10) / 10
        stop.update(epoch, acc, 1.0)
        if stop.should_stop(epoch):
            break
    assert epoch == 110 and stop.best_epoch == 10


def test_early_stopping_tie_breaks_on_loss():
    stop = EarlyStopping(5)
    assert stop.update(1, 0.5, 1.0)
    assert not stop.update(2, 0.5, 1.2)
    assert stop.update(3, 0.5, 0.8)
    assert stop.best_epoch == 3


def test_accuracy_examples():
    labels = np.array([0, 1, 2, 1])
    mask = np.ones(4, bool)
    assert accuracy(np.eye(3)[labels], labels, mask) == 1.0
    assert accuracy(np.zeros((4, 3)), labels, mask) == 0.25
    with pytest.raises(ValueError):
        accuracy(np.zeros((4, 3)), labels, np.zeros(4, bool))


def test_accuracy_matches_loop():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(20, 4))
    labels = rng.integers(0, 4, 20)
    mask = rng.random(20) < 0.6
    hits = [int(np.argmax(logits[i]) == labels[i]) for i in range(20) if mask[i]]
    assert accuracy(logits, labels, mask) == pytest.approx(sum(hits) / len(hits))


def test_record_invariants():
    g = macro()
    with pytest.raises(ValueError):
        EvalRecord(g, 1.2)
    with pytest.raises(ValueError):
        EvalRecord(g, 0.5, oom=True)
    rec = EvalRecord(g, 0.75, 0.5, 10, 400, epochs_run=3, seconds=0.1)
    assert EvalRecord.from_json(rec.to_json(1)) == rec
    assert set(rec.to_json(4)) >= {"iter", "genome", "val_acc", "test_acc", "params", "oom", "seconds"}


def test_deterministic_and_round_trip(sbm):
    cfg = TrainConfig(max_epochs=20, patience=5, seed=9)
    for genome in (macro(att_1="cos", agg_1="max"), micro(conv1="sage", conv2="gat2", do="0.5")):
        a, model = fit(genome, sbm, cfg)
        b = train_and_evaluate(genome, sbm, cfg)
        assert dataclasses.replace(a, seconds=0) == dataclasses.replace(b, seconds=0)
        assert a.error is None
        out = model.forward(sbm, training=False)
        assert accuracy(out, sbm.labels, sbm.valid_mask) == a.val_acc
        assert accuracy(out, sbm.labels, sbm.test_mask) == a.test_acc


def test_seed_changes_training(sbm):
    genome = micro(conv1="gcn", do="0.5")
    runs = {train_and_evaluate(genome, sbm, TrainConfig(max_epochs=5, patience=5, seed=s)).val_acc
            for s in range(6)}
    assert len(runs) > 1


def test_needs_masks(sbm):
    empty = sbm.with_masks(sbm.train_mask, np.zeros(sbm.num_nodes, bool), sbm.test_mask)
    with pytest.raises(ValueError):
        train_and_evaluate(macro(), empty)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=20)
    with pytest.raises(ValueError):
        MemoryBudget(0)


def test_micro_hyperparameters_from_genome(sbm):
    # lr 1e-4 with few epochs barely moves; lr 1e-2 learns the block structure
    slow = train_and_evaluate(micro(lr="0.0001"), sbm, TrainConfig(max_epochs=15, patience=15))
    fast = train_and_evaluate(micro(lr="0.01"), sbm, TrainConfig(max_epochs=15, patience=15))
    assert fast.val_acc > slow.val_acc


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["macro", "micro"]), st.integers(1, 10 ** 7))
def test_oom_depends_only_on_genome_dataset_budget(seed, kind, budget):
    g = generate_synthetic(30, 3, 3, 0.3, 0.02, 0.8, seed=0)
    genome = S.sample_uniform(kind, np.random.default_rng(seed))
    flags = {train_and_evaluate(genome, g, TrainConfig(max_epochs=1, patience=1, seed=s),
                                MemoryBudget(budget)).oom for s in (0, 1)}
    assert flags == {estimate_memory(genome, g) > budget}


@pytest.mark.parametrize("att", L.ATTENTIONS)
def test_training_loss_finite_each_attention(sbm, att):
    rec = train_and_evaluate(macro(att_1=att, att_2=att, act_1="relu"), sbm,
                             TrainConfig(max_epochs=10, patience=10))
    assert rec.error is None and rec.epochs_run == 10
