import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cilf.data import Standardizer, gen_synthetic
from cilf.encoder import EncoderConfig, EncoderModel, dumps_checkpoint, init_model
from cilf.errors import UsageError
from cilf.losses import LossConfig, soft_cross_entropy
from cilf.prototypes import PrototypeSet, nearest_prototype, proto_prob
from cilf.training import train_initial
from cilf.updater import (MemoryBuffer, distill_targets, incremental_update, init_memory,
                          rebalance_memory)


def identity_model(d=2):
    return EncoderModel(EncoderConfig(d, (), d), [np.eye(d), np.zeros(d)])


# -- distillation targets ---------------------------------------------------

def test_target_peaked_at_old_prototype():
    protos = PrototypeSet({0: [0.0, 0.0], 1: [10.0, 0.0], 2: [0.0, 10.0]})
    memory = MemoryBuffer(3, np.array([[0.0, 0.0]]), np.array([0]))
    t = distill_targets(identity_model(), protos, memory, 0.3)
    assert t[0, 0] > 0.95


def test_targets_repeatable_and_empty_memory():
    protos = PrototypeSet({0: [0.0, 0.0], 1: [1.0, 0.0]})
    memory = MemoryBuffer(4, np.array([[0.2, 0.1], [0.9, 0.3]]), np.array([0, 1]))
    model = identity_model()
    np.testing.assert_array_equal(distill_targets(model, protos, memory, 0.3),
                                  distill_targets(model, protos, memory, 0.3))
    assert distill_targets(model, protos, MemoryBuffer(4), 0.3).shape == (0, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_distillation_bounded_below_by_target_entropy(seed):
    rng = np.random.default_rng(seed)
    protos = PrototypeSet({k: rng.standard_normal(3) for k in range(4)})
    E = rng.standard_normal((1, 3))
    T = rng.dirichlet(np.ones(4), 1)
    entropy = float(-(T * np.log(T)).sum())
    loss, _ = soft_cross_entropy(E, T, protos, 0.5)
    assert loss >= entropy - 1e-12
    # equality when the model's distribution is the target
    P = proto_prob(E, protos, 0.5)
    same, _ = soft_cross_entropy(E, P, protos, 0.5)
    assert same == pytest.approx(float(-(P * np.log(P)).sum()), abs=1e-12)


# -- memory -----------------------------------------------------------------

def test_initial_quota():
    X = np.arange(500.0).reshape(250, 2)
    y = np.repeat(np.arange(5), 50)
    assert set(init_memory(X, y, 100).per_class().values()) == {20}
    small = init_memory(X, y, 7)
    assert small.per_class() == {c: 1 for c in range(5)} and len(small) == 5
    a, b = init_memory(X, y, 50, seed=3), init_memory(X, y, 50, seed=3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    with pytest.raises(UsageError):
        init_memory(X, y, 4)


def test_rebalance_hand_case():
    memory = MemoryBuffer(60, np.zeros((60, 2)), np.repeat([0, 1, 2], 20))
    out = rebalance_memory(memory, np.ones((40, 2)), np.full(40, 7))
    assert out.per_class() == {0: 15, 1: 15, 2: 15, 7: 15}
    assert len(out) == 60


def test_rebalance_without_novel_and_with_few_examples():
    memory = MemoryBuffer(60, np.zeros((60, 2)), np.repeat([0, 1, 2], 20))
    same = rebalance_memory(memory, np.zeros((0, 2)), np.zeros(0, int))
    np.testing.assert_array_equal(same.labels, memory.labels)
    out = rebalance_memory(memory, np.ones((3, 2)), [9, 9, 9])
    assert out.per_class()[9] == 3
    with pytest.raises(UsageError):
        rebalance_memory(MemoryBuffer(3, np.zeros((3, 2)), [0, 1, 2]), np.ones((1, 2)), [5])


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 80), st.lists(st.tuples(st.integers(1, 3), st.integers(1, 30)), max_size=5),
       st.integers(0, 1000))
def test_memory_stays_within_capacity_and_label_space(capacity, steps, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((120, 2))
    y = rng.integers(0, 3, 120)
    y[:3] = [0, 1, 2]
    memory = init_memory(X, y, capacity, seed)
    seen = {0, 1, 2}
    next_id = 3
    for n_classes, per in steps:
        if len(seen) + n_classes > capacity:
            break
        labels = np.repeat(np.arange(next_id, next_id + n_classes), per)
        memory = rebalance_memory(memory, rng.standard_normal((labels.size, 2)), labels, seed=seed)
        seen |= set(labels.tolist())
        next_id += n_classes
        assert len(memory) <= capacity
        assert set(memory.classes) <= seen


def test_memory_dict_round_trip():
    memory = MemoryBuffer(5, np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1, 0]))
    back = MemoryBuffer.from_dict(memory.to_dict())
    assert back.per_class() == memory.per_class() and back.capacity == 5


# -- incremental update -----------------------------------------------------

def _blobs(separation):
    ds = gen_synthetic(3, 120, dim=2, spread=1.0, separation=separation, seed=4)
    rng = np.random.default_rng(0)
    hold = np.concatenate([rng.choice(np.flatnonzero(ds.labels == c), 30, replace=False)
                           for c in range(3)])
    train = np.setdiff1d(np.arange(len(ds)), hold)
    std = Standardizer.fit(ds.inputs[train][ds.labels[train] < 2])
    return std(ds.inputs), ds.labels, train, hold


@pytest.fixture(scope="module")
def blobs():
    return _blobs(10.0)


def test_empty_new_data_is_a_no_op():
    model = init_model(EncoderConfig(2, (4,), 2))
    protos = PrototypeSet({0: [0.0, 0.0], 1: [1.0, 1.0]})
    res = incremental_update(model, protos, np.zeros((0, 2)), np.zeros(0, int), None)
    assert res.model is model and res.prototypes is protos


def test_label_collision():
    model = init_model(EncoderConfig(2, (4,), 2))
    protos = PrototypeSet({0: [0.0, 0.0], 1: [1.0, 1.0]})
    with pytest.raises(UsageError, match="collide"):
        incremental_update(model, protos, np.zeros((2, 2)), [1, 2], None)


def test_reduces_to_initial_training(blobs):
    X, y, train, _ = blobs
    cfg = EncoderConfig(2, (8,), 4, init_seed=2)
    loss = LossConfig(lambda2=0.0)
    res = incremental_update(init_model(cfg), PrototypeSet(), X[train], y[train], MemoryBuffer(10),
                             loss, epochs=4, batch_size=32, seed=6)
    ref = train_initial(X[train], y[train], cfg, loss, epochs=4, batch_size=32, seed=6)
    assert dumps_checkpoint(res.model, res.prototypes) == dumps_checkpoint(*ref)


def _update_accuracy(blobs, seed, use_memory, capacity=40):
    X, y, train, hold = blobs
    tr_known = train[y[train] < 2]
    tr_new = train[y[train] == 2]
    model, protos = train_initial(X[tr_known], y[tr_known],
                                  EncoderConfig(2, (32,), 8, init_seed=seed), epochs=15,
                                  batch_size=64, seed=seed)
    memory = init_memory(X[tr_known], y[tr_known], capacity, seed) if use_memory else None
    before = np.mean(nearest_prototype(model.embed(X[hold][y[hold] < 2]), protos) == y[hold][y[hold] < 2])
    res = incremental_update(model, protos, X[tr_new], y[tr_new], memory, epochs=15, seed=seed)
    pred = nearest_prototype(res.model.embed(X[hold]), res.prototypes)
    known = y[hold] < 2
    return before, np.mean(pred[known] == y[hold][known]), np.mean(pred[~known] == y[hold][~known])


def test_update_learns_new_class_and_keeps_old(blobs):
    _, known_acc, novel_acc = _update_accuracy(blobs, 0, True)
    assert known_acc >= 0.95 and novel_acc >= 0.95


def test_replay_reduces_known_class_drop():
    # at 10 sigma nothing is forgotten with or without replay, so the classes
    # are moved to 4 sigma where the unreplayed model does forget
    blobs = _blobs(4.0)
    drop_on, drop_off = [], []
    for seed in range(10):
        b, k, _ = _update_accuracy(blobs, seed, True, capacity=100)
        drop_on.append(b - k)
        b, k, _ = _update_accuracy(blobs, seed, False)
        drop_off.append(b - k)
    assert np.mean(drop_off) > np.mean(drop_on)
