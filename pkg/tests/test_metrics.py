import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cilf.errors import UndefinedMetricError, UsageError
from cilf.metrics import (ForgettingLedger, auroc, forgetting, macro_f, match_clusters, micro_f,
                          normalized_accuracy, remap)

from oracles import brute_best_agreement, pairwise_auroc


def test_perfect_predictions():
    y = np.array([0, 1, 7, 7, 8])
    assert normalized_accuracy(y, y, [0, 1]) == 1.0
    assert macro_f(y, y) == 1.0 and micro_f(y, y) == 1.0


def test_na_hand_value():
    truth = np.array([0] * 5 + [9] * 5)
    pred = np.array([0, 0, 0, 0, 1] + [-1, -1, -1, 0, 0])
    # AKS = 4/5; the novel cluster -1 matches class 9, AUS = 3/5
    assert normalized_accuracy(pred, truth, [0, 1], 0.5) == pytest.approx(0.7)


def test_na_all_known_is_accuracy():
    truth = np.array([0, 1, 1, 0])
    assert normalized_accuracy(np.array([0, 1, 0, 0]), truth, [0, 1]) == pytest.approx(0.75)
    with pytest.raises(UsageError):
        normalized_accuracy(truth, truth, [0], lambda_r=2)


def test_macro_f_hand_value():
    truth = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    assert macro_f(pred, truth, [0, 1]) == pytest.approx((2 / 3 + 4 / 5) / 2)
    assert macro_f(pred, truth, [0, 1]) == pytest.approx(0.7333, abs=1e-4)


def test_micro_f_single_class_is_accuracy():
    truth = np.array([3, 3, 3, 3])
    pred = np.array([3, 3, 5, 3])
    assert micro_f(pred, truth, [3]) == pytest.approx(0.75)


def test_auroc_hand_values():
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([1, 3, 2, 4], [0, 0, 1, 1]) == 0.75
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auroc([1, 2], [1, 1])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=30), st.integers(0, 10_000))
def test_auroc_matches_pairwise_count_and_is_rank_invariant(raw, seed):
    rng = np.random.default_rng(seed)
    scores = np.asarray(raw, dtype=float)
    y = rng.integers(0, 2, scores.size).astype(bool)
    y[0], y[1] = True, False
    a = auroc(scores, y)
    assert a == pytest.approx(pairwise_auroc(scores, y))
    assert auroc(np.exp(scores) * 3 - 1, y) == pytest.approx(a)
    assert 0.0 <= a <= 1.0


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5))
def test_matching_is_optimal(seed, k_pred, k_true):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, k_pred, 25) - 10
    true = rng.integers(0, k_true, 25)
    mapped = remap(pred, match_clusters(pred, true))
    assert int(np.sum(mapped == true)) == brute_best_agreement(list(pred), list(true))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_ranges_and_micro_equals_accuracy(seed):
    rng = np.random.default_rng(seed)
    true = rng.integers(0, 5, 30)
    pred = rng.integers(0, 5, 30)
    known = [0, 1, 2]
    for v in (normalized_accuracy(pred, true, known), macro_f(pred, true, known),
              micro_f(pred, true, known)):
        assert 0.0 <= v <= 1.0
    assert micro_f(pred, true, list(range(5))) == pytest.approx(np.mean(pred == true))


def test_forgetting_hand_values():
    led = ForgettingLedger([[0.9], [0.81, 0.81]], a_star=0.9)
    A, F = forgetting(led)
    assert A == pytest.approx([0.9, 0.81])
    assert F == pytest.approx(0.05)
    assert forgetting(ForgettingLedger([[0.7]], a_star=0.7))[1] == 0.0
    assert forgetting(ForgettingLedger([[0.8], [0.8, 0.8]], a_star=0.8))[1] == 0.0


def test_forgetting_can_be_negative_and_errors():
    assert forgetting(ForgettingLedger([[1.0]], a_star=0.9))[1] < 0
    with pytest.raises(UndefinedMetricError):
        forgetting(ForgettingLedger([[0.5]], a_star=0.0))
    with pytest.raises(UndefinedMetricError):
        forgetting(ForgettingLedger([[float("nan")]], a_star=1.0))
    led = ForgettingLedger()
    with pytest.raises(UsageError):
        led.add_row([0.5, 0.5])
    led.add_row([0.5])
    led.add_row([0.5, float("nan")])
    assert forgetting(ForgettingLedger(led.acc, 1.0))[0] == [0.5, 0.5]
