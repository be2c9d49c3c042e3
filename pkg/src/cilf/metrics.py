"""Detection and forgetting metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import UndefinedMetricError, UsageError


def match_clusters(predictions, truth, fixed_ids=()) -> dict:
    """Optimal one-to-one map from predicted ids to true ids.

    Ids in ``fixed_ids`` map to themselves and are excluded from matching;
    the remaining predicted ids are matched to the remaining true ids so as
    to maximise agreement. Unmatched predicted ids map to themselves.
    """
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    fixed = {int(c) for c in fixed_ids}
    free_pred = sorted({int(p) for p in pred} - fixed)
    free_true = sorted({int(t) for t in true} - fixed)
    mapping = {c: c for c in fixed}
    if free_pred and free_true:
        counts = np.zeros((len(free_pred), len(free_true)))
        pi = {c: i for i, c in enumerate(free_pred)}
        ti = {c: i for i, c in enumerate(free_true)}
        for p, t in zip(pred, true):
            if int(p) in pi and int(t) in ti:
                counts[pi[int(p)], ti[int(t)]] += 1
        rows, cols = linear_sum_assignment(-counts)
        for r, c in zip(rows, cols):
            mapping[free_pred[r]] = free_true[c]
    # unmatched clusters get ids that no true class uses
    every = [int(v) for v in np.concatenate([pred, true])] + list(fixed)
    spare = min(every) - 1
    for c in free_pred:
        if c not in mapping:
            mapping[c] = spare
            spare -= 1
    return mapping


def remap(predictions, mapping) -> np.ndarray:
    return np.asarray([mapping.get(int(p), int(p)) for p in predictions])


def normalized_accuracy(predictions, truth, known_ids, lambda_r: float = 0.5) -> float:
    """``lambda_r * AKS + (1 - lambda_r) * AUS``.

    AKS is accuracy on instances of known classes; AUS is accuracy on novel
    instances after optimally matching predicted novel clusters to novel
    classes. If one side has no instances the other gets full weight.
    """
    if not 0 <= lambda_r <= 1:
        raise UsageError("lambda_r must lie in [0, 1]")
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.size == 0:
        raise UndefinedMetricError("no instances to score")
    known = np.isin(true, np.asarray(list(known_ids), dtype=true.dtype))
    mapped = remap(pred, match_clusters(pred, true, known_ids))
    correct = mapped == true
    has_k, has_u = known.any(), (~known).any()
    aks = correct[known].mean() if has_k else None
    aus = correct[~known].mean() if has_u else None
    if aks is None:
        return float(aus)
    if aus is None:
        return float(aks)
    return float(lambda_r * aks + (1 - lambda_r) * aus)


def _f1_parts(pred, true):
    classes = np.union1d(np.unique(pred), np.unique(true))
    tp = np.array([np.sum((pred == c) & (true == c)) for c in classes], dtype=float)
    fp = np.array([np.sum((pred == c) & (true != c)) for c in classes], dtype=float)
    fn = np.array([np.sum((pred != c) & (true == c)) for c in classes], dtype=float)
    return classes, tp, fp, fn


def _mapped(predictions, truth, fixed_ids):
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.size == 0 or pred.shape != true.shape:
        raise UsageError("predictions and truth must be non-empty and equally long")
    return remap(pred, match_clusters(pred, true, fixed_ids)), true


def macro_f(predictions, truth, fixed_ids=None) -> float:
    """Unweighted mean of per-class F1 over classes present in truth.

    ``fixed_ids=None`` matches every predicted id; pass the known classes to
    match only the novel clusters.
    """
    pred, true = _mapped(predictions, truth, () if fixed_ids is None else fixed_ids)
    classes, tp, fp, fn = _f1_parts(pred, true)
    in_truth = np.isin(classes, np.unique(true))
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1[in_truth].mean())


def micro_f(predictions, truth, fixed_ids=None) -> float:
    pred, true = _mapped(predictions, truth, () if fixed_ids is None else fixed_ids)
    _, tp, fp, fn = _f1_parts(pred, true)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    return float(2 * tp.sum() / denom) if denom else 0.0


def auroc(scores, is_novel) -> float:
    """Mann-Whitney estimate of P(score_novel > score_known), ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_novel, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both novel and known instances")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ForgettingLedger:
    """``acc[m][n]``: holdout accuracy on classes introduced at stage n, after stage m.

    Stage 0 is initial training; stage m >= 1 is the update after window m.
    An entry is NaN when stage n introduced no class with holdout data; such
    entries are left out of the averages.
    """

    acc: list = field(default_factory=list)
    a_star: float = 1.0

    def add_row(self, row):
        m = len(self.acc)
        if len(row) != m + 1:
            raise UsageError(f"row {m} must have {m + 1} entries, got {len(row)}")
        if any(not (np.isnan(v) or 0 <= v <= 1) for v in row):
            raise UsageError("accuracies must lie in [0, 1]")
        self.acc.append([float(v) for v in row])


def forgetting(ledger: ForgettingLedger):
    """Returns ``(A, Forgetting)`` where ``A[m]`` is the mean of row m."""
    if not ledger.a_star > 0:
        raise UndefinedMetricError("optimal accuracy A* must be positive")
    if not ledger.acc:
        raise UsageError("ledger is empty")
    A = []
    for m, row in enumerate(ledger.acc):
        if len(row) != m + 1:
            raise UsageError(f"ledger row {m} is incomplete")
        vals = np.asarray(row, dtype=np.float64)
        if np.all(np.isnan(vals)):
            raise UndefinedMetricError(f"ledger row {m} has no defined entries")
        A.append(float(np.nanmean(vals)))
    return A, float((ledger.a_star - np.mean(A)) / ledger.a_star)
