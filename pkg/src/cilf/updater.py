"""Incremental model update with exemplar memory, distillation and prototype anchoring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderModel
from .errors import UsageError
from .losses import LossConfig
from .optim import OptimizerConfig
from .prototypes import PrototypeSet, init_prototypes, proto_prob
from .training import fit


@dataclass
class MemoryBuffer:
    capacity: int
    inputs: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        if self.inputs is None:
            self.inputs = np.zeros((0, 0))
            self.labels = np.zeros(0, dtype=np.int64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) > self.capacity:
            raise UsageError(f"memory holds {len(self.labels)} entries, capacity {self.capacity}")

    def __len__(self):
        return int(self.labels.size)

    @property
    def classes(self) -> list:
        return [int(c) for c in np.unique(self.labels)]

    def per_class(self) -> dict:
        return {int(c): int(n) for c, n in zip(*np.unique(self.labels, return_counts=True))}

    def to_dict(self) -> dict:
        return {"capacity": int(self.capacity),
                "entries": {str(c): [[float(v) for v in x] for x in self.inputs[self.labels == c]]
                            for c in self.classes}}

    @classmethod
    def from_dict(cls, d) -> "MemoryBuffer":
        xs, ys = [], []
        for c, rows in d["entries"].items():
            xs.extend(rows)
            ys.extend([int(c)] * len(rows))
        if not xs:
            return cls(int(d["capacity"]))
        return cls(int(d["capacity"]), np.asarray(xs), np.asarray(ys))


def init_memory(inputs, labels, capacity: int, seed: int = 0) -> MemoryBuffer:
    """``floor(capacity / C)`` random exemplars per initial class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if capacity < classes.size:
        raise UsageError(f"capacity {capacity} is smaller than the class count {classes.size}")
    quota = capacity // classes.size
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.extend(sorted(rng.choice(idx, size=min(quota, idx.size), replace=False).tolist()))
    keep = np.asarray(keep, dtype=int)
    return MemoryBuffer(capacity, np.asarray(inputs, dtype=np.float64)[keep], labels[keep])


def rebalance_memory(memory: MemoryBuffer, new_inputs, new_labels, capacity: int | None = None,
                     seed: int = 0) -> MemoryBuffer:
    """Make room for newly labelled classes.

    Each old class loses ``floor(|new| * |M| / (|old| * |all|))`` random
    entries, each new class gets ``floor(|M| / |all|)`` random samples (or all
    it has), and any remaining excess is evicted from the largest classes.
    """
    capacity = memory.capacity if capacity is None else int(capacity)
    new_labels = np.asarray(new_labels, dtype=np.int64)
    old = memory.classes
    novel = [int(c) for c in np.unique(new_labels) if int(c) not in old]
    total = len(old) + len(novel)
    if capacity < total:
        raise UsageError(f"capacity {capacity} is smaller than the class count {total}")
    if not novel:
        return MemoryBuffer(capacity, memory.inputs.copy(), memory.labels.copy())
    rng = np.random.default_rng(seed)
    remove = (len(novel) * capacity) // (len(old) * total) if old else 0
    take = capacity // total
    xs, ys = [], []
    for c in old:
        idx = np.flatnonzero(memory.labels == c)
        n_keep = max(idx.size - remove, 0)
        kept = np.sort(rng.choice(idx, size=n_keep, replace=False))
        xs.append(memory.inputs[kept])
        ys.append(memory.labels[kept])
    new_inputs = np.asarray(new_inputs, dtype=np.float64)
    for c in novel:
        idx = np.flatnonzero(new_labels == c)
        picked = np.sort(rng.choice(idx, size=min(take, idx.size), replace=False))
        xs.append(new_inputs[picked])
        ys.append(new_labels[picked])
    X = np.vstack(xs) if xs else np.zeros((0, new_inputs.shape[1]))
    y = np.concatenate(ys) if ys else np.zeros(0, np.int64)
    while y.size > capacity:
        classes, counts = np.unique(y, return_counts=True)
        largest = classes[counts == counts.max()]
        c = largest[0]
        victim = rng.choice(np.flatnonzero(y == c))
        X = np.delete(X, victim, axis=0)
        y = np.delete(y, victim)
    return MemoryBuffer(capacity, X, y)


def distill_targets(old_model: EncoderModel, old_prototypes: PrototypeSet, memory: MemoryBuffer,
                    alpha: float) -> np.ndarray:
    """Prototype probabilities of memory exemplars under the frozen pre-update model."""
    if len(memory) == 0 or len(old_prototypes) == 0:
        return np.zeros((0, len(old_prototypes)))
    return np.atleast_2d(proto_prob(old_model.embed(memory.inputs), old_prototypes, alpha))


@dataclass
class UpdateResult:
    model: EncoderModel
    prototypes: PrototypeSet
    known_ids: list
    history: list = field(default_factory=list)


def incremental_update(model: EncoderModel, prototypes: PrototypeSet, new_inputs, new_labels,
                       memory: MemoryBuffer | None, loss_cfg: LossConfig | None = None,
                       opt_cfg: OptimizerConfig | None = None, epochs: int = 20,
                       batch_size: int = 128, seed: int = 0, extra_inputs=None,
                       extra_labels=None) -> UpdateResult:
    """Retrain on new-class data plus memory.

    Objective per batch: cross-entropy over every labelled row, distillation
    of the frozen model's old-class probabilities on memory rows, hard-triplet
    hinge over the batch, and a drift penalty keeping old prototypes near
    their pre-update values. New prototypes start at the class means of the
    new data. ``extra_*`` are labelled rows of already-known classes (e.g.
    known instances returned by the label oracle); they join the
    cross-entropy and triplet terms only.
    """
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    new_labels = np.asarray(new_labels, dtype=np.int64)
    known = prototypes.ids
    if new_labels.size == 0:
        return UpdateResult(model, prototypes, list(known))
    clash = sorted(set(np.unique(new_labels).tolist()) & set(known))
    if clash:
        raise UsageError(f"new-class labels collide with known classes: {clash}")
    new_inputs = np.asarray(new_inputs, dtype=np.float64)

    new_protos = init_prototypes(model.embed(new_inputs), new_labels, prototypes.ema_beta)
    protos = prototypes.with_centroids(new_protos.centroids)

    parts_x, parts_y = [new_inputs], [new_labels]
    memory = memory if memory is not None else MemoryBuffer(0)
    soft = None
    if len(memory):
        targets = distill_targets(model, prototypes, memory, loss_cfg.alpha)
        start = new_inputs.shape[0]
        soft = {"rows": np.arange(start, start + len(memory)), "targets": targets, "ids": known}
        parts_x.append(memory.inputs)
        parts_y.append(memory.labels)
    if extra_inputs is not None and len(extra_labels):
        extra_labels = np.asarray(extra_labels, dtype=np.int64)
        unknown = sorted(set(extra_labels.tolist()) - set(known))
        if unknown:
            raise UsageError(f"extra rows carry classes that are not known: {unknown}")
        parts_x.append(np.asarray(extra_inputs, dtype=np.float64))
        parts_y.append(extra_labels)
    X = np.vstack(parts_x)
    y = np.concatenate(parts_y)

    anchors = prototypes if len(prototypes) else None
    res = fit(model, protos, X, y, loss_cfg, opt_cfg, epochs, batch_size, seed,
              anchors=anchors, soft_targets=soft)
    return UpdateResult(res.model, res.prototypes, list(res.prototypes.ids), res.history)
