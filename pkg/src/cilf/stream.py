"""Replaying a labelled dataset as a stream of windows with emerging classes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, UsageError


@dataclass
class WindowSpec:
    t: int
    present: dict  # class id -> instance count
    novel: list
    disappeared: list
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, int), repr=False)

    def to_dict(self, with_indices=False):
        d = {"t": self.t,
             "present": {str(c): int(n) for c, n in sorted(self.present.items())},
             "novel": [int(c) for c in self.novel],
             "disappeared": [int(c) for c in self.disappeared]}
        if with_indices:
            d["indices"] = [int(i) for i in self.indices]
        return d


@dataclass
class StreamManifest:
    seed: int
    mode: str
    initial_classes: list
    windows: list
    holdout_fraction: float
    initial_indices: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, int))
    holdout_indices: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, int))
    p_disappear: float = 0.3
    k_range: tuple = (1, 1)

    @property
    def T(self):
        return len(self.windows)

    def introduced_at(self) -> dict:
        """Class id -> window index at which it first appears (0 for initial classes)."""
        out = {int(c): 0 for c in self.initial_classes}
        for w in self.windows:
            for c in w.novel:
                out[int(c)] = w.t
        return out

    def to_dict(self, with_indices=False):
        d = {"seed": self.seed, "mode": self.mode,
             "initial_classes": [int(c) for c in self.initial_classes],
             "windows": [w.to_dict(with_indices) for w in self.windows],
             "holdout_fraction": self.holdout_fraction,
             "p_disappear": self.p_disappear,
             "k_range": list(self.k_range)}
        if with_indices:
            d["initial_indices"] = [int(i) for i in self.initial_indices]
            d["holdout_indices"] = [int(i) for i in self.holdout_indices]
        return d

    def to_json(self, with_indices=False) -> str:
        return json.dumps(self.to_dict(with_indices), indent=1)

    @classmethod
    def from_dict(cls, d) -> "StreamManifest":
        windows = [WindowSpec(int(w["t"]), {int(c): int(n) for c, n in w["present"].items()},
                              [int(c) for c in w["novel"]], [int(c) for c in w["disappeared"]],
                              np.asarray(w.get("indices", []), dtype=int))
                   for w in d["windows"]]
        return cls(int(d["seed"]), d["mode"], [int(c) for c in d["initial_classes"]], windows,
                   float(d.get("holdout_fraction", 0.2)),
                   np.asarray(d.get("initial_indices", []), dtype=int),
                   np.asarray(d.get("holdout_indices", []), dtype=int),
                   float(d.get("p_disappear", 0.3)), tuple(d.get("k_range", (1, 1))))


def build_manifest(labels, mode: str = "single", C: int = 5, T: int = 5, k_range=(2, 3),
                   seed: int = 0, holdout_fraction: float = 0.2,
                   p_disappear: float = 0.3) -> StreamManifest:
    """Schedule which classes appear in each window and partition the instances.

    A stratified holdout is reserved first. In ``single`` mode at most one new
    class starts per window; in ``multiple`` mode the count is drawn uniformly
    from ``k_range`` (fewer once classes run out). Every previously seen class
    is absent from a given window with probability ``p_disappear`` and may
    come back later; at least one previously seen class is always present.
    A class's non-holdout instances are split evenly over the windows in which
    it is present (window 0 being the initial training split).
    """
    if mode not in ("single", "multiple"):
        raise UsageError(f"mode must be 'single' or 'multiple', got {mode!r}")
    if C < 1 or T < 0:
        raise UsageError("need C >= 1 and T >= 0")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    k_lo, k_hi = (1, 1) if mode == "single" else (int(k_range[0]), int(k_range[1]))
    if k_lo > k_hi or k_lo < 0:
        raise UsageError(f"invalid k_range {k_range}")
    demand = 0 if T == 0 else (T if mode == "single" else k_lo)
    if classes.size < C + demand:
        raise InsufficientDataError(
            f"stream needs at least {C + demand} classes ({C} initial + {demand} novel), "
            f"dataset has {classes.size}; short by {C + demand - classes.size}")

    holdout, pools = [], {}
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = int(math.floor(holdout_fraction * idx.size))
        holdout.extend(idx[:n_hold].tolist())
        pools[int(c)] = idx[n_hold:]

    order = [int(c) for c in rng.permutation(classes)]
    initial = sorted(order[:C])
    remaining = order[C:]
    seen = list(initial)
    presence = {c: [0] for c in initial}
    specs = []
    for t in range(1, T + 1):
        k = 1 if mode == "single" else int(rng.integers(k_lo, k_hi + 1))
        k = min(k, len(remaining))
        novel = sorted(remaining[:k])
        remaining = remaining[k:]
        absent = [c for c in seen if rng.random() < p_disappear]
        if seen and len(absent) == len(seen):
            absent.remove(seen[int(rng.integers(len(seen)))])
        for c in seen:
            if c not in absent:
                presence[c].append(t)
        for c in novel:
            presence[c] = [t]
        specs.append(WindowSpec(t, {}, novel, sorted(absent)))
        seen.extend(novel)

    window_idx = {t: [] for t in range(T + 1)}
    for c, ts in presence.items():
        pool = pools[c]
        if pool.size < len(ts):
            raise InsufficientDataError(
                f"class {c} has {pool.size} non-holdout instances but is present in "
                f"{len(ts)} windows; short by {len(ts) - pool.size}")
        for t, part in zip(ts, np.array_split(pool, len(ts))):
            window_idx[t].extend(part.tolist())
            if t > 0:
                specs[t - 1].present[c] = int(part.size)
    for spec in specs:
        spec.present = dict(sorted(spec.present.items()))
        spec.indices = np.asarray(sorted(window_idx[spec.t]), dtype=int)

    return StreamManifest(int(seed), mode, initial, specs, float(holdout_fraction),
                          np.asarray(sorted(window_idx[0]), dtype=int),
                          np.asarray(sorted(holdout), dtype=int), float(p_disappear),
                          (k_lo, k_hi))


@dataclass
class WindowBatch:
    t: int
    inputs: np.ndarray
    indices: np.ndarray  # dataset rows, in presentation order


@dataclass
class GroundTruth:
    """Hidden labels of a window, in the same order as ``WindowBatch.inputs``."""

    labels: np.ndarray


def next_window(manifest: StreamManifest, dataset, t: int):
    """Unlabelled inputs of window ``t`` (shuffled) and their hidden labels."""
    if not 1 <= t <= manifest.T:
        raise UsageError(f"window index {t} outside 1..{manifest.T}")
    spec = manifest.windows[t - 1]
    rng = np.random.default_rng([manifest.seed, t])
    order = spec.indices[rng.permutation(spec.indices.size)]
    return (WindowBatch(t, dataset.inputs[order], order),
            GroundTruth(np.asarray(dataset.labels[order])))


@dataclass
class LabeledBatch:
    positions: np.ndarray  # rows of the window batch
    labels: np.ndarray

    def __len__(self):
        return int(self.positions.size)


@dataclass
class QueryResult:
    novel: LabeledBatch
    known: LabeledBatch

    def __len__(self):
        return len(self.novel) + len(self.known)


def query_labels(detected, percent: float, truth: GroundTruth, known_ids, seed: int = 0):
    """Reveal the true labels of ``ceil(percent% * |detected|)`` random detected instances.

    Returned instances whose class is already known come back separately so
    they can be used as ordinary labelled data of that class.
    """
    if not 0 < percent <= 100:
        raise UsageError(f"percent must lie in (0, 100], got {percent}")
    detected = np.asarray(detected, dtype=int)
    empty = LabeledBatch(np.zeros(0, int), np.zeros(0, int))
    if detected.size == 0:
        return QueryResult(empty, LabeledBatch(np.zeros(0, int), np.zeros(0, int)))
    n = int(math.ceil(percent / 100.0 * detected.size - 1e-9))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(detected, size=n, replace=False))
    y = np.asarray(truth.labels)[chosen]
    known = np.isin(y, np.asarray(list(known_ids), dtype=int))
    return QueryResult(LabeledBatch(chosen[~known], y[~known]),
                       LabeledBatch(chosen[known], y[known]))
