"""Curriculum clustering for novel-class detection.

Pipeline for one window: confidence weights from the previous model ->
weighted k-means initialisation of known + K novel prototypes -> curriculum
fine-tuning on easy-first prefixes -> silhouette CVI. Repeating this for
K = 0..K_max and picking the best CVI estimates the number of novel classes.

Novel clusters carry negative ids ``-1, -2, ...``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .encoder import EncoderModel
from .errors import UndefinedCVIError, UsageError
from .losses import LossConfig
from .optim import OptimizerConfig, OptimizerState, lookahead, sgd_nesterov_step
from .prototypes import (PrototypeSet, ema_update, proto_log_prob, proto_prob,
                         squared_distances)
from .training import batch_objective

log = logging.getLogger(__name__)

N_INIT = 10
MAX_KMEANS_ITER = 100


class InstanceWeight(NamedTuple):
    index: int
    confidence: float
    weight: float


@dataclass(frozen=True)
class WeightingConfig:
    gamma: float | None = None  # None: median confidence score of the window

    def __post_init__(self):
        if self.gamma is not None and not math.isfinite(self.gamma):
            raise UsageError("gamma must be finite")


@dataclass(frozen=True)
class PacingConfig:
    upsilon: float = 0.2
    delta: float = 3.0
    phi: int = 10

    def __post_init__(self):
        if not 0 < self.upsilon <= 1:
            raise UsageError(f"upsilon must lie in (0, 1], got {self.upsilon}")
        if not self.delta > 1:
            raise UsageError(f"delta must exceed 1, got {self.delta}")
        if int(self.phi) < 1:
            raise UsageError(f"phi must be a positive count, got {self.phi}")

    def saturating_batches(self) -> int:
        """Batches needed for the schedule to reach the full window once plus one step."""
        steps = math.ceil(math.log(1.0 / self.upsilon) / math.log(self.delta) - 1e-12)
        return int(self.phi) * (max(steps, 0) + 1)


@dataclass(frozen=True)
class DetectionConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    pacing: PacingConfig = field(default_factory=PacingConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    epochs: int = 10
    batches_per_epoch: int | None = None
    selection: str = "argmax"  # or "knee"
    order: str = "curriculum"  # or "random"
    # where each candidate assignment is scored: its own fine-tuned embedding,
    # the pre-fine-tune embedding, or the mean over all of those ("cross")
    cvi_space: str = "cross"

    def __post_init__(self):
        if self.selection not in ("argmax", "knee"):
            raise UsageError(f"unknown K selection mode {self.selection!r}")
        if self.order not in ("curriculum", "random"):
            raise UsageError(f"unknown ordering {self.order!r}")
        if self.cvi_space not in ("finetuned", "initial", "cross"):
            raise UsageError(f"unknown CVI space {self.cvi_space!r}")


# -- weighting ------------------------------------------------------------

@dataclass
class ConfidenceWeights:
    confidence: np.ndarray
    weight: np.ndarray
    gamma: float

    def instances(self) -> list:
        return [InstanceWeight(i, float(u), float(w))
                for i, (u, w) in enumerate(zip(self.confidence, self.weight))]


def instance_weight(u, gamma):
    return (np.asarray(u, dtype=np.float64) - gamma) ** 2


def confidence_weights(embeddings, prototypes: PrototypeSet, alpha: float,
                       cfg: WeightingConfig | None = None) -> ConfidenceWeights:
    """Self-taught confidence ``u = -log max_c p_c`` over known prototypes and ``w = (u - gamma)^2``."""
    cfg = cfg or WeightingConfig()
    logp = proto_log_prob(embeddings, prototypes, alpha)
    u = -logp.max(axis=1)
    u = np.maximum(u, 0.0)
    gamma = float(np.median(u)) if cfg.gamma is None else float(cfg.gamma)
    return ConfidenceWeights(u, instance_weight(u, gamma), gamma)


# -- weighted k-means initialisation ---------------------------------------

@dataclass
class KMeansTrace:
    assignments: np.ndarray
    objective: list
    iterations: int
    fallback_seeding: bool


def weighted_mean(points, weights):
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return None
    return (weights[:, None] * points).sum(axis=0) / total


def _seed_novel(E, known_centers, K, rng, greedy=False):
    """Pick K seeds among instances farther than the median from every known prototype.

    ``greedy`` takes the farthest remaining candidate each time (maximin);
    otherwise candidates are sampled with probability proportional to their
    squared distance from the chosen centres (k-means++).
    """
    dmin = squared_distances(E, known_centers).min(axis=1) if len(known_centers) else \
        np.full(len(E), np.inf)
    candidates = np.flatnonzero(dmin > np.median(dmin)) if len(known_centers) else \
        np.arange(len(E))
    fallback = False
    seeds = []
    centers = [c for c in known_centers]
    for _ in range(K):
        pool = np.setdiff1d(candidates, seeds)
        if pool.size == 0:
            if not fallback:
                log.warning("no candidate seeds left for novel clusters; "
                            "falling back to global farthest-point seeding")
            fallback = True
            pool = np.setdiff1d(np.arange(len(E)), seeds)
            if pool.size == 0:
                break
            d = squared_distances(E[pool], np.asarray(centers)).min(axis=1) if centers else \
                np.zeros(pool.size)
            pick = pool[int(np.argmax(d))]
        else:
            if centers:
                d = squared_distances(E[pool], np.asarray(centers)).min(axis=1)
            else:
                d = np.ones(pool.size)
            total = d.sum()
            if greedy:
                pick = pool[int(np.argmax(d))]
            elif total > 0 and np.isfinite(total):
                pick = pool[rng.choice(pool.size, p=d / total)]
            else:
                pick = pool[rng.integers(pool.size)]
        seeds.append(int(pick))
        centers.append(E[pick])
    return [E[s].copy() for s in seeds], fallback


def kmeans_objective(E, weights, centers, assignments) -> float:
    diff = E - centers[assignments]
    return float((weights * np.einsum("nd,nd->n", diff, diff)).sum())


def _lloyd(E, w, centers, n_known, max_iter):
    """Lloyd iterations moving only the centres after ``n_known``."""
    assign = np.argmin(squared_distances(E, centers), axis=1)
    history = [kmeans_objective(E, w, centers, assign)]
    it = 0
    for it in range(1, max_iter + 1):
        current = history[-1]
        for k in range(n_known, centers.shape[0]):
            members = assign == k
            m = weighted_mean(E[members], w[members]) if members.any() else None
            if m is None:
                continue
            trial = centers.copy()
            trial[k] = m
            value = kmeans_objective(E, w, trial, assign)
            # the weighted mean is optimal; this only rejects rounding noise
            if value <= current:
                centers, current = trial, value
        history.append(current)
        d = squared_distances(E, centers)
        new_assign = np.argmin(d, axis=1)
        # keep current cluster on exact ties so the objective stays monotone
        keep = d[np.arange(len(E)), assign] <= d[np.arange(len(E)), new_assign]
        new_assign = np.where(keep, assign, new_assign)
        history.append(kmeans_objective(E, w, centers, new_assign))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers, assign, history, it


def weighted_kmeans_init(embeddings, weights, old_prototypes: PrototypeSet, K: int,
                         beta: float | None = None, seed: int = 0,
                         max_iter: int = MAX_KMEANS_ITER, return_trace: bool = False,
                         n_init: int = N_INIT):
    """Semi-supervised weighted k-means over known prototypes plus K novel clusters.

    Known centroids stay pinned at their previous values while assignments
    settle, so the weighted objective cannot increase. The first restart
    seeds novel clusters by maximin, the others by k-means++ sampling; the
    restart with the lowest unweighted objective wins. On the converged assignment,
    known prototypes become ``beta * old + (1 - beta) * wmean`` (unchanged
    when nothing is assigned) and novel prototypes the weighted mean of
    their members.
    """
    if K < 0:
        raise UsageError("K must be non-negative")
    E = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (E.shape[0],) or np.any(w < 0):
        raise UsageError("weights must be a non-negative vector, one per instance")
    if not w.sum() > 0:
        raise UsageError("weights are all zero")
    beta = old_prototypes.ema_beta if beta is None else beta
    known_ids = old_prototypes.ids
    known = old_prototypes.matrix() if known_ids else np.zeros((0, E.shape[1]))
    n_known = len(known_ids)
    rng = np.random.default_rng(seed)

    best = None
    for r in range(max(1, n_init) if K > 0 else 1):
        novel, fallback = _seed_novel(E, known, K, rng, greedy=(r == 0))
        centers = np.vstack([known] + ([np.asarray(novel)] if novel else []))
        if centers.shape[0] == 0:
            raise UsageError("no prototypes and K = 0: nothing to cluster")
        run = _lloyd(E, w, centers, n_known, max_iter)
        # restarts are ranked by the unweighted objective: confidence weights are
        # near zero on many novel instances, so the weighted one barely sees them
        score = kmeans_objective(E, np.ones_like(w), run[0], run[1])
        if best is None or score < best[0]:
            best = (score, run, fallback, len(novel))
    _, (centers, assign, history, it), fallback, n_novel = best
    novel_ids = [-(k + 1) for k in range(n_novel)]

    result = {}
    for k, c in enumerate(known_ids):
        members = assign == k
        m = weighted_mean(E[members], w[members]) if members.any() else None
        result[c] = old_prototypes[c] if m is None else beta * old_prototypes[c] + (1 - beta) * m
    for k, c in enumerate(novel_ids):
        result[c] = centers[n_known + k]
    protos = PrototypeSet(result, old_prototypes.ema_beta)
    if return_trace:
        return protos, KMeansTrace(np.asarray(known_ids + novel_ids)[assign], history, it, fallback)
    return protos


# -- pacing --------------------------------------------------------------

def pacing_schedule(n_total: int, cfg: PacingConfig | None = None, num_batches: int | None = None):
    """Prefix sizes ``round(min(upsilon * delta^floor(l/phi), 1) * N)`` for l = 0..L-1, at least 1."""
    cfg = cfg or PacingConfig()
    if n_total < 1:
        raise UsageError("pacing needs at least one instance")
    L = cfg.saturating_batches() if num_batches is None else int(num_batches)
    sizes = []
    for l in range(L):
        frac = min(cfg.upsilon * cfg.delta ** (l // int(cfg.phi)), 1.0)
        sizes.append(max(1, min(n_total, int(math.floor(frac * n_total + 0.5)))))
    return sizes


# -- fine-tuning ---------------------------------------------------------

@dataclass
class FinetuneResult:
    model: EncoderModel
    prototypes: PrototypeSet
    pseudo_labels: np.ndarray
    embeddings: np.ndarray
    history: list


def pseudo_label(embeddings, prototypes: PrototypeSet, alpha):
    p = proto_prob(embeddings, prototypes, alpha)
    p = np.atleast_2d(p)
    return np.asarray(prototypes.ids)[np.argmax(p, axis=1)]


def _interleave(order, groups):
    """Round-robin over groups, keeping each group's internal order."""
    per = {}
    for i in order:
        per.setdefault(groups[i], []).append(i)
    queues = list(per.values())
    out = []
    depth = 0
    while len(out) < len(order):
        for q in queues:
            if depth < len(q):
                out.append(q[depth])
        depth += 1
    return np.asarray(out, dtype=int)


def curriculum_finetune(model: EncoderModel, prototypes_init: PrototypeSet, inputs,
                        anchors: PrototypeSet, cfg: DetectionConfig | None = None,
                        weights=None, seed: int = 0) -> FinetuneResult:
    """Fine-tune on easy-first prefixes of the window with pseudo-labels.

    ``anchors`` are the pre-window known prototypes that the drift penalty
    pulls toward. ``weights`` (larger = easier) fixes the curriculum order:
    each initial pseudo-class is ranked easy-first and the classes are
    interleaved, so every prefix holds the easiest members of every cluster
    rather than only the most confident cluster. With ``cfg.order ==
    "random"`` the prefixes come from a fresh permutation every epoch.
    """
    cfg = cfg or DetectionConfig()
    X = np.asarray(inputs, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise UsageError("cannot fine-tune on an empty window")
    rng = np.random.default_rng(seed)
    opt = cfg.optimizer
    loss_cfg = cfg.loss
    params = [p.copy() for p in model.params]
    protos = prototypes_init.copy()
    state = OptimizerState.zeros_like(params)
    E = model.embed(X)
    pseudo = pseudo_label(E, protos, loss_cfg.alpha)
    if weights is None:
        weights = np.ones(n)
    easy_first = np.argsort(-np.asarray(weights, dtype=np.float64), kind="stable")
    easy_first = _interleave(easy_first, pseudo)
    sizes = pacing_schedule(n, cfg.pacing, cfg.batches_per_epoch)
    history = []
    current = model
    for _ in range(cfg.epochs):
        order = easy_first if cfg.order == "curriculum" else rng.permutation(n)
        epoch_loss = 0.0
        for h in sizes:
            idx = order[:h]
            look = model.with_params(lookahead(params, state, opt))
            res = batch_objective(look, X[idx], pseudo[idx], protos, loss_cfg, anchors, rng=rng)
            params, state = sgd_nesterov_step(params, res.param_grads, state, opt)
            if res.drift_grads:
                protos = protos.with_centroids(
                    {c: protos[c] - opt.learning_rate * g for c, g in res.drift_grads.items()})
            epoch_loss += res.loss
        current = model.with_params(params)
        E = current.embed(X)
        means = {int(c): E[pseudo == c].mean(axis=0) for c in np.unique(pseudo)}
        protos = ema_update(protos, means)
        pseudo = pseudo_label(E, protos, loss_cfg.alpha)
        history.append(epoch_loss)
    return FinetuneResult(current, protos, pseudo, E, history)


# -- cluster validity ----------------------------------------------------

def silhouettes(embeddings, assignments) -> np.ndarray:
    """Per-instance silhouette with Euclidean distance; singletons and a = b = 0 give 0."""
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(assignments)
    clusters, inverse = np.unique(labels, return_inverse=True)
    if clusters.size < 2:
        raise UndefinedCVIError("silhouette needs at least two non-empty clusters")
    D = np.sqrt(squared_distances(E, E))
    onehot = np.zeros((len(E), clusters.size))
    onehot[np.arange(len(E)), inverse] = 1.0
    sizes = onehot.sum(axis=0)
    sums = D @ onehot  # distance from each point to every cluster, summed
    own = sizes[inverse]
    a = np.where(own > 1, sums[np.arange(len(E)), inverse] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(E)), inverse] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.zeros(len(E))
    ok = (own > 1) & (denom > 0)
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    return s


def silhouette_cvi(embeddings, assignments, include=None) -> float:
    """Sum of silhouettes over the instances selected by ``include`` (default: all).

    Instances outside ``include`` still count as cluster members when
    computing everyone else's a(x) and b(x).
    """
    s = silhouettes(embeddings, assignments)
    if include is None:
        return float(s.sum())
    return float(s[np.asarray(include)].sum())


def select_k(cvi: dict, mode: str = "argmax") -> int:
    ks = sorted(cvi)
    vals = np.array([cvi[k] for k in ks])
    best = ks[int(np.argmax(vals))]
    if mode == "argmax" or len(ks) < 3:
        return best
    # sharpest concave bend: most negative second difference
    second = vals[:-2] - 2 * vals[1:-1] + vals[2:]
    return ks[1 + int(np.argmin(second))]


# -- K sweep -------------------------------------------------------------

@dataclass
class DetectionReport:
    pseudo_labels: np.ndarray
    k_star: int
    cvi: dict
    novelty_scores: np.ndarray
    model: EncoderModel
    prototypes: PrototypeSet
    known_ids: list
    k_star_argmax: int = 0
    k_star_knee: int = 0
    embeddings: np.ndarray | None = None

    @property
    def novel_mask(self) -> np.ndarray:
        return np.asarray(self.pseudo_labels) < 0

    def to_dict(self) -> dict:
        return {
            "k_star": int(self.k_star),
            "cvi": {str(k): float(v) for k, v in sorted(self.cvi.items())},
            "pseudo_labels": [int(v) for v in self.pseudo_labels],
            "novelty_scores": [float(v) for v in self.novelty_scores],
            "k_star_argmax": int(self.k_star_argmax),
            "k_star_knee": int(self.k_star_knee),
        }


def novelty_scores(embeddings, prototypes: PrototypeSet, known_ids, pseudo_labels=None) -> np.ndarray:
    """Minimum squared distance to any known prototype.

    With ``pseudo_labels`` each known prototype is first re-centred on the
    instances carrying its label (classes with no members keep their
    prototype), which removes the lag the moving average leaves behind.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    centers = prototypes.matrix(list(known_ids))
    if pseudo_labels is not None:
        pseudo = np.asarray(pseudo_labels)
        centers = np.array([E[pseudo == c].mean(axis=0) if np.any(pseudo == c) else mu
                            for c, mu in zip(known_ids, centers)])
    return squared_distances(E, centers).min(axis=1)


def _window_cvi(E, labels, reference=None) -> float:
    if reference is not None and len(reference[0]):
        ref_E, ref_y = reference
        allE = np.vstack([E, ref_E])
        ally = np.concatenate([labels, ref_y])
        include = np.arange(len(E))
    else:
        allE, ally, include = E, labels, None
    try:
        return silhouette_cvi(allE, ally, include)
    except UndefinedCVIError:
        return 0.0


def estimate_classes(model: EncoderModel, prototypes: PrototypeSet, inputs, k_max: int,
                     cfg: DetectionConfig | None = None, seed: int = 0,
                     reference=None) -> DetectionReport:
    """Sweep K = 0..k_max novel clusters and keep the best-scoring fine-tune.

    ``reference`` is an optional ``(inputs, labels)`` pair of labelled
    exemplars of known classes (the memory buffer). They are embedded with
    each candidate model and join the silhouette computation as fixed
    members of their classes, so a novel group sitting alone next to an
    absent known class is not mistaken for that class. Only window instances
    contribute to the CVI sum.

    Each candidate's pseudo-labels are scored in several embedding spaces
    according to ``cfg.cvi_space``. The default ``"cross"`` averages the
    silhouette over the pre-window embedding and every candidate's
    fine-tuned embedding. A fine-tune can pull a novel group into a known
    cluster, and its own space then rates that merge highly; the other spaces
    do not. Ties go to the smaller K.
    """
    if k_max < 0:
        raise UsageError("k_max must be non-negative")
    cfg = cfg or DetectionConfig()
    X = np.asarray(inputs, dtype=np.float64)
    if X.shape[0] == 0:
        raise UsageError("empty window")
    known_ids = prototypes.ids
    E0 = model.embed(X)
    cw = confidence_weights(E0, prototypes, cfg.loss.alpha, cfg.weighting)
    w = cw.weight if cw.weight.sum() > 0 else np.ones(len(X))

    runs = {}
    for K in range(k_max + 1):
        sub = seed * 1009 + K
        init = weighted_kmeans_init(E0, w, prototypes, K, seed=sub)
        runs[K] = curriculum_finetune(model, init, X, prototypes, cfg, weights=w, seed=sub)

    have_ref = reference is not None and len(reference[0])

    def space(m, E):
        return E, ((m.embed(reference[0]), np.asarray(reference[1])) if have_ref else None)

    if cfg.cvi_space == "cross":
        spaces = [space(model, E0)] + [space(ft.model, ft.embeddings) for ft in runs.values()]
        cvi = {K: float(np.mean([_window_cvi(E, ft.pseudo_labels, ref) for E, ref in spaces]))
               for K, ft in runs.items()}
    elif cfg.cvi_space == "initial":
        E, ref = space(model, E0)
        cvi = {K: _window_cvi(E, ft.pseudo_labels, ref) for K, ft in runs.items()}
    else:
        cvi = {}
        for K, ft in runs.items():
            E, ref = space(ft.model, ft.embeddings)
            cvi[K] = _window_cvi(E, ft.pseudo_labels, ref)

    k_arg = select_k(cvi, "argmax")
    k_knee = select_k(cvi, "knee")
    k_star = k_arg if cfg.selection == "argmax" else k_knee
    best = runs[k_star]
    scores = novelty_scores(best.embeddings, best.prototypes, known_ids, best.pseudo_labels)
    return DetectionReport(best.pseudo_labels, k_star, cvi, scores, best.model, best.prototypes,
                           known_ids, k_arg, k_knee, best.embeddings)
