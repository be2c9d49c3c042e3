import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cilf.data import Standardizer, gen_synthetic
from cilf.detector import (DetectionConfig, _interleave, PacingConfig, WeightingConfig, confidence_weights,
                           curriculum_finetune, estimate_classes, instance_weight,
                           pacing_schedule, select_k, silhouette_cvi, silhouettes,
                           weighted_kmeans_init, weighted_mean)
from cilf.encoder import EncoderConfig
from cilf.errors import UndefinedCVIError, UsageError
from cilf.prototypes import PrototypeSet, nearest_prototype
from cilf.training import train_initial
from cilf.updater import init_memory

from oracles import brute_silhouette_sum, weighted_objective


# -- weighting --------------------------------------------------------------

def test_weight_hand_values():
    assert instance_weight(1.5, 1.5) == 0.0
    assert instance_weight(3.5, 1.5) == 4.0


def test_confident_instance_weight_is_gamma_squared():
    protos = PrototypeSet({0: [0.0, 0.0], 1: [100.0, 0.0]})
    cw = confidence_weights(np.zeros((1, 2)), protos, 0.3, WeightingConfig(gamma=2.0))
    assert cw.confidence[0] == pytest.approx(0.0, abs=1e-12)
    assert cw.weight[0] == pytest.approx(4.0)


def test_default_gamma_is_median_confidence():
    protos = PrototypeSet({0: [0.0, 0.0], 1: [3.0, 0.0]})
    E = np.array([[0.0, 0.0], [1.0, 0.0], [1.5, 0.0]])
    cw = confidence_weights(E, protos, 0.3)
    assert cw.gamma == pytest.approx(np.median(cw.confidence))
    assert [iw.index for iw in cw.instances()] == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 0.99))
def test_weight_strictly_convex_with_minimum_at_gamma(u1, u2, gamma, lam):
    w = lambda u: float(instance_weight(u, gamma))
    assert w(gamma) == 0.0 and w(u1) >= 0.0
    if abs(u1 - u2) > 1e-3:
        mid = lam * u1 + (1 - lam) * u2
        assert w(mid) < lam * w(u1) + (1 - lam) * w(u2)


# -- weighted k-means -------------------------------------------------------

def test_weighted_mean_hand_value():
    np.testing.assert_allclose(weighted_mean([[0.0, 0.0], [2.0, 0.0]], [1.0, 3.0]), [1.5, 0.0])
    assert weighted_mean([[1.0, 1.0]], [0.0]) is None


def test_known_centroid_blends_toward_weighted_mean():
    E = np.array([[1.0, 0.0], [1.0, 2.0], [0.0, 1.0], [2.0, 1.0]])
    old = PrototypeSet({0: [0.0, 0.0], 1: [50.0, 50.0]})
    new = weighted_kmeans_init(E, np.ones(4), old, 0, beta=0.8)
    np.testing.assert_allclose(new[0], [0.2, 0.2])
    np.testing.assert_allclose(new[1], [50.0, 50.0])
    assert new.ids == [0, 1]


def test_novel_clusters_get_negative_ids():
    rng = np.random.default_rng(0)
    E = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(8, 0.1, (20, 2)),
                   rng.normal(-8, 0.1, (20, 2))])
    protos, trace = weighted_kmeans_init(E, np.ones(60), PrototypeSet({0: [0.0, 0.0]}), 2,
                                         return_trace=True)
    assert protos.ids == [0, -1, -2]
    assert sorted(np.unique(trace.assignments[20:40]).tolist() +
                  np.unique(trace.assignments[40:]).tolist()) == [-2, -1]


def test_seeding_falls_back_when_no_candidates(caplog):
    # every instance is equally far from the known prototype: nobody exceeds the median
    E = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    with caplog.at_level(logging.WARNING, logger="cilf.detector"):
        _, trace = weighted_kmeans_init(E, np.ones(4), PrototypeSet({0: [0.0, 0.0]}), 1,
                                        return_trace=True, n_init=1)
    assert trace.fallback_seeding
    assert "falling back" in caplog.text


def test_kmeans_argument_errors():
    old = PrototypeSet({0: [0.0, 0.0]})
    with pytest.raises(UsageError):
        weighted_kmeans_init(np.zeros((2, 2)), np.ones(2), old, -1)
    with pytest.raises(UsageError):
        weighted_kmeans_init(np.zeros((2, 2)), np.zeros(2), old, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 3))
def test_kmeans_objective_never_increases(seed, K):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((40, 2)) * rng.uniform(0.5, 3)
    w = rng.uniform(0, 2, 40)
    old = PrototypeSet({k: rng.standard_normal(2) for k in range(2)})
    _, trace = weighted_kmeans_init(E, w, old, K, seed=seed, return_trace=True)
    assert all(b <= a for a, b in zip(trace.objective, trace.objective[1:]))


def test_trace_objective_matches_oracle_at_convergence():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((30, 2))
    w = rng.uniform(0.1, 1, 30)
    old = PrototypeSet({0: [1.0, 1.0], 1: [-1.0, -1.0]})
    from cilf.detector import _lloyd
    centers, assign, history, _ = _lloyd(E, w, np.vstack([old.matrix(), [[2.0, -2.0]]]), 2, 50)
    assert history[-1] == pytest.approx(weighted_objective(E, w, centers, assign))


# -- pacing -----------------------------------------------------------------

def test_pacing_hand_table():
    sizes = pacing_schedule(1000, PacingConfig(0.2, 3, 10), 30)
    assert (sizes[0], sizes[10], sizes[20], sizes[25]) == (200, 600, 1000, 1000)
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))


def test_pacing_edge_cases():
    assert set(pacing_schedule(57, PacingConfig(upsilon=1.0), 12)) == {57}
    assert set(pacing_schedule(1, PacingConfig(), 30)) == {1}
    assert PacingConfig().saturating_batches() == 30
    with pytest.raises(UsageError):
        PacingConfig(delta=1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.floats(0.01, 1.0), st.floats(1.1, 5), st.integers(1, 20))
def test_pacing_monotone_and_bounded(n, ups, delta, phi):
    sizes = pacing_schedule(n, PacingConfig(ups, delta, phi), 60)
    assert all(1 <= h <= n for h in sizes)
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))


# -- silhouette -------------------------------------------------------------

def test_silhouette_hand_case():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]])
    s = silhouettes(E, [0, 0, 1, 1])
    # outer points: a = 1, b = 10.5; inner points: a = 1, b = 9.5
    np.testing.assert_allclose(s, [9.5 / 10.5, 8.5 / 9.5, 8.5 / 9.5, 9.5 / 10.5])
    assert silhouette_cvi(E, [0, 0, 1, 1]) == pytest.approx(3.5990, abs=1e-4)


def test_coincident_points_score_zero():
    assert silhouette_cvi(np.zeros((6, 2)), [0, 0, 0, 1, 1, 1]) == 0.0


def test_single_cluster_is_undefined():
    with pytest.raises(UndefinedCVIError):
        silhouette_cvi(np.ones((3, 2)), [4, 4, 4])


def test_random_labels_on_one_blob_score_near_zero():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        E = rng.standard_normal((100, 2))
        labels = rng.integers(0, 3, 100)
        cvi = silhouette_cvi(E, labels)
        assert abs(cvi) < 0.2 * 100
        assert cvi == pytest.approx(brute_silhouette_sum(E, labels), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 5), st.integers(0, 10_000))
def test_silhouette_matches_oracle_and_is_bounded(n, k, seed):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n, 3))
    labels = rng.integers(0, k, n)
    if np.unique(labels).size < 2:
        labels[0], labels[1] = 0, 1
    s = silhouettes(E, labels)
    assert np.all(s >= -1) and np.all(s <= 1)
    assert s.sum() == pytest.approx(brute_silhouette_sum(E, labels), abs=1e-9)


def test_include_restricts_the_sum():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]])
    assert silhouette_cvi(E, [0, 0, 1, 1], include=[0, 1]) == pytest.approx(9.5 / 10.5 + 8.5 / 9.5)


def test_select_k_modes():
    assert select_k({0: 1.0, 1: 5.0, 2: 4.0}) == 1
    assert select_k({0: 0.0, 1: 10.0, 2: 11.0, 3: 11.5}, "knee") == 1
    assert select_k({0: 2.0}, "knee") == 0


# -- fine-tuning and the K sweep ----------------------------------------------

@pytest.fixture(scope="module")
def learner():
    """Encoder trained on classes 0-3 of a six-blob dataset, plus the scaled data."""
    ds = gen_synthetic(6, 60, dim=2, spread=1.0, separation=10.0, seed=11)
    known = ds.labels < 4
    std = Standardizer.fit(ds.inputs[known])
    X = std(ds.inputs)
    model, protos = train_initial(X[known], ds.labels[known],
                                  EncoderConfig(2, (32,), 8, init_seed=0), epochs=20,
                                  batch_size=64, seed=0)
    memory = init_memory(X[known], ds.labels[known], 200, 0)
    return model, protos, X, ds.labels, (memory.inputs, memory.labels)


def _window(X, y, classes, seed, per_class=30):
    rng = np.random.default_rng(seed)
    idx = np.concatenate([rng.choice(np.flatnonzero(y == c), per_class, replace=False)
                          for c in classes])
    idx = rng.permutation(idx)
    return X[idx], y[idx]


def test_k0_finetune_not_worse_than_frozen_model(learner):
    model, protos, X, y, ref = learner
    Xw, yw = _window(X, y, [0, 1, 2, 3], 0)
    base = np.mean(nearest_prototype(model.embed(Xw), protos) == yw)
    w = confidence_weights(model.embed(Xw), protos, 0.3).weight
    init = weighted_kmeans_init(model.embed(Xw), w, protos, 0)
    ft = curriculum_finetune(model, init, Xw, protos, weights=w)
    assert np.mean(ft.pseudo_labels == yw) >= base


def test_two_novel_blobs_recovered_exactly(learner):
    model, protos, X, y, ref = learner
    Xw, yw = _window(X, y, [0, 4, 5], 1)
    E = model.embed(Xw)
    w = confidence_weights(E, protos, 0.3).weight
    init = weighted_kmeans_init(E, w, protos, 2, seed=1)
    ft = curriculum_finetune(model, init, Xw, protos, weights=w, seed=1)
    for c in (4, 5):
        got = np.unique(ft.pseudo_labels[yw == c])
        assert got.size == 1 and got[0] < 0
    assert np.unique(ft.pseudo_labels[yw == 4])[0] != np.unique(ft.pseudo_labels[yw == 5])[0]


def test_no_novel_class_gives_k0(learner):
    model, protos, X, y, ref = learner
    hits = 0
    for seed in range(5):
        Xw, _ = _window(X, y, [0, 1, 2, 3], seed + 10)
        hits += estimate_classes(model, protos, Xw, 3, seed=seed, reference=ref).k_star == 0
    assert hits >= 4


def test_two_novel_blobs_give_k2(learner):
    # class 5 sits next to class 0, which is absent from the window; without the
    # exemplar reference, naming the blob "0" or "novel" is the same partition
    model, protos, X, y, ref = learner
    hits = 0
    for seed in range(5):
        Xw, _ = _window(X, y, [1, 2, 4, 5], seed + 20)
        hits += estimate_classes(model, protos, Xw, 4, seed=seed, reference=ref).k_star == 2
    assert hits >= 4


def test_k_max_zero_and_determinism(learner):
    model, protos, X, y, ref = learner
    Xw, _ = _window(X, y, [0, 4], 5)
    cfg = DetectionConfig(epochs=2)
    rep = estimate_classes(model, protos, Xw, 0, cfg)
    assert rep.k_star == 0 and list(rep.cvi) == [0]
    a = estimate_classes(model, protos, Xw, 2, cfg, seed=3).to_dict()
    b = estimate_classes(model, protos, Xw, 2, cfg, seed=3).to_dict()
    assert a == b


def test_detection_errors(learner):
    model, protos, _, _, _ = learner
    with pytest.raises(UsageError):
        estimate_classes(model, protos, np.zeros((0, 2)), 2)
    with pytest.raises(UsageError):
        estimate_classes(model, protos, np.zeros((3, 2)), -1)
    with pytest.raises(UsageError):
        DetectionConfig(order="sideways")


def test_interleave_round_robin_keeps_group_order():
    order = np.array([5, 0, 3, 1, 4, 2])
    groups = np.array([0, 1, 0, 1, 0, 0])  # indexed by instance
    np.testing.assert_array_equal(_interleave(order, groups), [5, 3, 0, 1, 4, 2])
