"""Prototype cross-entropy, hard-triplet mining and the triplet hinge.

Every loss returns its value together with the gradient w.r.t. the
embeddings it was given; losses that depend on prototypes can also return
the gradient w.r.t. the prototype matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .prototypes import PrototypeSet, proto_log_prob, squared_distances


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    lambda1: float = 1.0
    lambda2: float = 1.0
    margin: float = 1.0
    positive: str = "random"  # random | hardest

    def __post_init__(self):
        if not self.alpha > 0:
            raise UsageError(f"alpha must be positive, got {self.alpha}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("lambda1 and lambda2 must be non-negative")
        if not self.margin > 0:
            raise UsageError(f"margin must be positive, got {self.margin}")
        if self.positive not in ("random", "hardest"):
            raise UsageError(f"positive must be 'random' or 'hardest', got {self.positive!r}")


def soft_cross_entropy(embeddings, targets, prototypes: PrototypeSet, alpha, ids=None,
                       with_proto_grad=False):
    """``sum_i -sum_c t_ic log p_ic`` where p is the prototype softmax over ``ids``.

    Returns ``(loss, d_embeddings)`` or ``(loss, d_embeddings, d_prototypes)``
    where ``d_prototypes`` has rows ordered like ``ids``.
    """
    ids = prototypes.ids if ids is None else list(ids)
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    M = prototypes.matrix(ids)
    logp = proto_log_prob(E, prototypes, alpha, ids)
    loss = float(-(T * logp).sum())
    # d loss / d logit = p * sum(t) - t; logit_c = -alpha * ||e - mu_c||^2
    G = np.exp(logp) * T.sum(axis=1, keepdims=True) - T
    grad_e = 2.0 * alpha * (G @ M - G.sum(axis=1, keepdims=True) * E)
    if not with_proto_grad:
        return loss, grad_e
    grad_m = 2.0 * alpha * (G.T @ E - G.sum(axis=0)[:, None] * M)
    return loss, grad_e, grad_m


def one_hot(labels, ids) -> np.ndarray:
    index = {int(c): k for k, c in enumerate(ids)}
    labels = np.asarray(labels)
    out = np.zeros((labels.size, len(ids)))
    for i, c in enumerate(labels):
        try:
            out[i, index[int(c)]] = 1.0
        except KeyError:
            raise UsageError(f"label {int(c)} has no prototype") from None
    return out


def intra_loss(embeddings, labels, prototypes: PrototypeSet, alpha, with_proto_grad=False):
    """Prototype cross-entropy with hard labels: ``sum_i -log p_{i, y_i}``."""
    ids = prototypes.ids
    if not ids:
        raise UsageError("prototype set is empty")
    return soft_cross_entropy(embeddings, one_hot(labels, ids), prototypes, alpha, ids,
                              with_proto_grad=with_proto_grad)


@dataclass(frozen=True)
class TripletSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # (n_triplets, n_classes_in_batch - 1)
    num_classes: int

    def __len__(self):
        return int(self.anchors.size)

    @classmethod
    def empty(cls, num_classes=0):
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros((0, max(num_classes - 1, 0)), int),
                   num_classes)


def pairwise_sq_dists(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    sq = np.einsum("nd,nd->n", E, E)
    D = sq[:, None] - 2.0 * E @ E.T + sq[None, :]
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def mine_hard_triplets(embeddings, labels, positive: str = "hardest", rng=None) -> TripletSet:
    """One positive and one hardest negative per other class, for each anchor.

    ``positive="hardest"`` takes the farthest same-class member;
    ``"random"`` draws one uniformly with ``rng``. Anchors whose class has a
    single member in the batch are skipped.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        return TripletSet.empty(int(classes.size))
    if positive not in ("hardest", "random"):
        raise UsageError(f"unknown positive selection {positive!r}")
    if positive == "random" and rng is None:
        rng = np.random.default_rng(0)
    D = pairwise_sq_dists(embeddings)
    n = labels.size
    member_idx = {c: np.flatnonzero(labels == c) for c in classes}
    anchors, positives, negatives = [], [], []
    for i in range(n):
        same = member_idx[labels[i]]
        same = same[same != i]
        if same.size == 0:
            continue
        if positive == "hardest":
            positives.append(same[np.argmax(D[i, same])])
        else:
            positives.append(same[rng.integers(same.size)])
        negs = []
        for c in classes:
            if c == labels[i]:
                continue
            others = member_idx[c]
            negs.append(others[np.argmin(D[i, others])])
        anchors.append(i)
        negatives.append(negs)
    if not anchors:
        return TripletSet.empty(int(classes.size))
    return TripletSet(np.asarray(anchors), np.asarray(positives),
                      np.asarray(negatives, dtype=int).reshape(len(anchors), classes.size - 1),
                      int(classes.size))


def inter_loss(triplets: TripletSet, embeddings, margin: float = 1.0):
    """``sum [m + d(a, p) - min_c d(a, n_c)]_+`` with squared Euclidean d."""
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    grad = np.zeros_like(E)
    if len(triplets) == 0:
        return 0.0, grad
    n = E.shape[0]
    for arr in (triplets.anchors, triplets.positives, triplets.negatives):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise UsageError("triplet index out of range for the embedding batch")
    a, p = triplets.anchors, triplets.positives
    diff_ap = E[a] - E[p]
    d_ap = np.einsum("nd,nd->n", diff_ap, diff_ap)
    diff_an = E[a][:, None, :] - E[triplets.negatives]
    d_an = np.einsum("nkd,nkd->nk", diff_an, diff_an)
    k = np.argmin(d_an, axis=1)
    rows = np.arange(len(a))
    neg = triplets.negatives[rows, k]
    hinge = margin + d_ap - d_an[rows, k]
    active = hinge > 0
    loss = float(hinge[active].sum())
    if active.any():
        ga = 2.0 * diff_ap[active] - 2.0 * diff_an[rows[active], k[active]]
        np.add.at(grad, a[active], ga)
        np.add.at(grad, p[active], -2.0 * diff_ap[active])
        np.add.at(grad, neg[active], 2.0 * diff_an[rows[active], k[active]])
    return loss, grad


def prototype_drift(prototypes: PrototypeSet, anchors: PrototypeSet):
    """``sum_c ||mu_c - anchor_c||^2`` over classes in ``anchors``, with gradient per class."""
    loss = 0.0
    grads = {}
    for c in anchors.ids:
        if c not in prototypes:
            continue
        diff = prototypes[c] - anchors[c]
        loss += float(diff @ diff)
        grads[c] = 2.0 * diff
    return loss, grads
