"""Class prototypes in embedding space and the distance-softmax over them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError


@dataclass
class PrototypeSet:
    """Ordered map ``class_id -> centroid``.

    Insertion order is kept; it fixes the column order of probability
    matrices and is preserved through checkpoints.
    """

    centroids: dict = field(default_factory=dict)
    ema_beta: float = 0.8

    def __post_init__(self):
        if not 0 <= self.ema_beta < 1:
            raise UsageError(f"ema_beta must lie in [0, 1), got {self.ema_beta}")
        self.centroids = {int(k): np.asarray(v, dtype=np.float64).copy()
                          for k, v in self.centroids.items()}
        dims = {v.shape for v in self.centroids.values()}
        if len(dims) > 1:
            raise UsageError(f"prototype vectors disagree in shape: {sorted(dims)}")
        for k, v in self.centroids.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"prototype {k} has non-finite entries")

    @property
    def ids(self) -> list:
        return list(self.centroids)

    def __len__(self):
        return len(self.centroids)

    def __contains__(self, class_id):
        return int(class_id) in self.centroids

    def __getitem__(self, class_id):
        return self.centroids[int(class_id)]

    def matrix(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        if not ids:
            return np.zeros((0, 0))
        return np.stack([self.centroids[int(c)] for c in ids])

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.centroids, self.ema_beta)

    def subset(self, ids) -> "PrototypeSet":
        return PrototypeSet({int(c): self.centroids[int(c)] for c in ids}, self.ema_beta)

    def with_centroids(self, updates: dict) -> "PrototypeSet":
        merged = dict(self.centroids)
        merged.update({int(k): v for k, v in updates.items()})
        return PrototypeSet(merged, self.ema_beta)


def squared_distances(embeddings, centers) -> np.ndarray:
    """(N, K) matrix of squared Euclidean distances."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    diff = e[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _log_softmax_neg(dist, alpha):
    logits = -alpha * dist
    logits = logits - logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def proto_log_prob(embeddings, prototypes: PrototypeSet, alpha: float, ids=None):
    if len(prototypes) == 0:
        raise UsageError("prototype set is empty")
    if not alpha > 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    dist = squared_distances(embeddings, prototypes.matrix(ids))
    return _log_softmax_neg(dist, alpha)


def proto_prob(embeddings, prototypes: PrototypeSet, alpha: float, ids=None) -> np.ndarray:
    """Softmax of ``-alpha * ||f(x) - mu_c||^2`` over prototypes.

    Accepts a single embedding (returns a vector) or an (N, e) matrix.
    Columns follow ``ids`` (default: ``prototypes.ids``).
    """
    single = np.ndim(embeddings) == 1
    p = np.exp(proto_log_prob(embeddings, prototypes, alpha, ids))
    return p[0] if single else p


def nearest_prototype(embeddings, prototypes: PrototypeSet, ids=None) -> np.ndarray:
    ids = prototypes.ids if ids is None else list(ids)
    dist = squared_distances(embeddings, prototypes.matrix(ids))
    return np.asarray(ids)[np.argmin(dist, axis=1)]


def init_prototypes(embeddings, labels, ema_beta: float = 0.8) -> PrototypeSet:
    """Class means of the embeddings, in order of first appearance of each label."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UsageError("cannot initialise prototypes from an empty class set")
    order = list(dict.fromkeys(int(c) for c in labels))
    centroids = {}
    for c in order:
        members = embeddings[labels == c]
        if len(members) == 0:
            raise UsageError(f"class {c} has no instances")
        centroids[c] = members.mean(axis=0)
    return PrototypeSet(centroids, ema_beta)


def ema_update(prototypes: PrototypeSet, epoch_class_means: dict, beta: float | None = None):
    """Temporal-ensemble step: ``mu <- beta * mu + (1 - beta) * mean``.

    Classes missing from ``epoch_class_means`` keep their centroid.
    """
    beta = prototypes.ema_beta if beta is None else beta
    if not 0 <= beta < 1:
        raise UsageError(f"beta must lie in [0, 1), got {beta}")
    updates = {}
    for c, mean in epoch_class_means.items():
        if int(c) not in prototypes:
            raise UsageError(f"class {c} has no prototype to update")
        updates[int(c)] = beta * prototypes[c] + (1.0 - beta) * np.asarray(mean, dtype=np.float64)
    return prototypes.with_centroids(updates)
