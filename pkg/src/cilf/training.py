"""Batch objective shared by every training stage, and initial embedding training.

The objective on a batch B is::

    (CE(B) + distill(B ∩ memory) + lambda1 * hinge(B)) / |B|  +  lambda2 * R

CE is the prototype cross-entropy on hard labels, the hinge term uses hard
triplets mined inside B, and R pulls anchored prototypes toward their
previous values. Initial training uses only the first and third terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderModel, backward, forward, init_model
from .errors import UsageError
from .losses import (LossConfig, inter_loss, intra_loss, mine_hard_triplets, prototype_drift,
                     soft_cross_entropy)
from .optim import OptimizerConfig, OptimizerState, lookahead, sgd_nesterov_step
from .prototypes import PrototypeSet, ema_update, init_prototypes


@dataclass
class Distillation:
    """Soft targets for some rows of a batch.

    ``rows`` index into the batch, ``targets`` is ``(len(rows), len(ids))``.
    """

    rows: np.ndarray
    targets: np.ndarray
    ids: list


@dataclass
class BatchResult:
    loss: float
    param_grads: list
    proto_grads: dict
    drift_grads: dict
    embeddings: np.ndarray
    terms: dict = field(default_factory=dict)


def batch_objective(model: EncoderModel, inputs, labels, prototypes: PrototypeSet,
                    loss_cfg: LossConfig, anchors: PrototypeSet | None = None,
                    distill: Distillation | None = None, rng=None) -> BatchResult:
    E, cache = forward(model, inputs)
    n = E.shape[0]
    ids = prototypes.ids
    ce, gE, gM = intra_loss(E, labels, prototypes, loss_cfg.alpha, with_proto_grad=True)
    proto_grads = {c: gM[k] for k, c in enumerate(ids)}

    kd = 0.0
    if distill is not None and len(distill.rows):
        kd, gK, gKM = soft_cross_entropy(E[distill.rows], distill.targets, prototypes,
                                         loss_cfg.alpha, distill.ids, with_proto_grad=True)
        np.add.at(gE, distill.rows, gK)
        for k, c in enumerate(distill.ids):
            proto_grads[c] = proto_grads[c] + gKM[k]

    trip = mine_hard_triplets(E, labels, loss_cfg.positive, rng)
    hinge, gH = inter_loss(trip, E, loss_cfg.margin)

    drift, drift_grads = 0.0, {}
    if anchors is not None and loss_cfg.lambda2:
        drift, raw = prototype_drift(prototypes, anchors)
        drift_grads = {c: loss_cfg.lambda2 * g for c, g in raw.items()}

    scale = 1.0 / n
    proto_grads = {c: scale * g + drift_grads.get(c, 0.0) for c, g in proto_grads.items()}
    loss = scale * (ce + kd + loss_cfg.lambda1 * hinge) + loss_cfg.lambda2 * drift
    upstream = scale * (gE + loss_cfg.lambda1 * gH)
    grads = backward(model, cache, upstream)
    return BatchResult(loss, grads, proto_grads, drift_grads, E,
                       {"ce": ce, "distill": kd, "hinge": hinge, "drift": drift,
                        "triplets": len(trip)})


def objective_value(params, prototypes, model_cfg, inputs, labels, loss_cfg, anchors=None,
                    distill=None) -> float:
    """Scalar objective as a function of raw parameter blocks (for gradient checks)."""
    model = EncoderModel(model_cfg, params)
    return batch_objective(model, inputs, labels, prototypes, loss_cfg, anchors, distill).loss


def _class_sums(embeddings, labels, sums, counts):
    for c in np.unique(labels):
        mask = labels == c
        c = int(c)
        sums[c] = sums.get(c, 0.0) + embeddings[mask].sum(axis=0)
        counts[c] = counts.get(c, 0) + int(mask.sum())


@dataclass
class FitResult:
    model: EncoderModel
    prototypes: PrototypeSet
    history: list


def fit(model: EncoderModel, prototypes: PrototypeSet, inputs, labels, loss_cfg: LossConfig,
        opt_cfg: OptimizerConfig, epochs: int, batch_size: int, seed: int,
        anchors: PrototypeSet | None = None, soft_targets: dict | None = None) -> FitResult:
    """Shuffled mini-batch training with per-epoch prototype EMA.

    ``soft_targets`` maps a row index of ``inputs`` to a distribution over
    ``soft_targets['ids']`` (key ``'rows'`` / ``'targets'``) for distillation.
    Anchored prototypes additionally take a gradient step on the drift penalty
    after every batch; all others move only through the EMA.
    """
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    params = [p.copy() for p in model.params]
    protos = prototypes.copy()
    state = OptimizerState.zeros_like(params)
    history = []
    kd_lookup = None
    if soft_targets is not None and len(soft_targets["rows"]):
        kd_lookup = np.full(n, -1)
        kd_lookup[np.asarray(soft_targets["rows"])] = np.arange(len(soft_targets["rows"]))

    for _ in range(epochs):
        perm = rng.permutation(n)
        sums, counts = {}, {}
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            distill = None
            if kd_lookup is not None:
                pos = kd_lookup[idx]
                rows = np.flatnonzero(pos >= 0)
                distill = Distillation(rows, np.asarray(soft_targets["targets"])[pos[rows]],
                                       soft_targets["ids"])
            look = model.with_params(lookahead(params, state, opt_cfg))
            res = batch_objective(look, X[idx], y[idx], protos, loss_cfg, anchors, distill, rng)
            params, state = sgd_nesterov_step(params, res.param_grads, state, opt_cfg)
            if res.drift_grads:
                protos = protos.with_centroids(
                    {c: protos[c] - opt_cfg.learning_rate * g for c, g in res.drift_grads.items()})
            _class_sums(res.embeddings, y[idx], sums, counts)
            epoch_loss += res.loss
        protos = ema_update(protos, {c: sums[c] / counts[c] for c in sums})
        history.append(epoch_loss)
    return FitResult(model.with_params(params), protos, history)


def train_initial(inputs, labels, encoder_cfg: EncoderConfig, loss_cfg: LossConfig | None = None,
                  opt_cfg: OptimizerConfig | None = None, epochs: int = 20,
                  batch_size: int = 128, seed: int = 0, ema_beta: float = 0.8,
                  return_history: bool = False):
    """Initial embedding training on fully labelled data.

    Returns ``(model, prototypes)``, plus the per-epoch loss history when
    ``return_history`` is set.
    """
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise UsageError("initial training needs at least two classes")
    model = init_model(encoder_cfg)
    protos = init_prototypes(model.embed(inputs), labels, ema_beta)
    res = fit(model, protos, inputs, labels, loss_cfg, opt_cfg, epochs, batch_size, seed)
    if return_history:
        return res.model, res.prototypes, res.history
    return res.model, res.prototypes


def full_objective(model, prototypes, inputs, labels, loss_cfg) -> float:
    """Objective over the whole dataset as a single batch."""
    return batch_objective(model, inputs, labels, prototypes, loss_cfg).loss
