"""Run configuration and the end-to-end streaming loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .detector import DetectionConfig, PacingConfig, WeightingConfig, estimate_classes
from .encoder import EncoderConfig, checkpoint_dict
from .errors import CILFError, ConfigError, PipelineError, UndefinedMetricError
from .losses import LossConfig
from .metrics import (ForgettingLedger, auroc, forgetting, macro_f, micro_f,
                      normalized_accuracy)
from .optim import OptimizerConfig
from .prototypes import PrototypeSet, nearest_prototype
from .stream import build_manifest, next_window, query_labels
from .training import train_initial
from .updater import MemoryBuffer, incremental_update, init_memory, rebalance_memory

log = logging.getLogger(__name__)


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | csv | idx
    path: str | None = None
    images: str | None = None
    labels: str | None = None
    limit: int | None = None
    num_classes: int = 8
    per_class: int = 300
    dim: int = 2
    spread: float = 0.05
    separation: float = 10.0
    seed: int | None = None  # None: use the run seed


@dataclass
class EncoderSection:
    hidden_dims: list = field(default_factory=lambda: [128, 64])
    embedding_dim: int = 32
    init_seed: int | None = None  # None: use the run seed


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 128
    ema_beta: float = 0.8


@dataclass
class DetectSection:
    k_max: int = 3
    epochs: int = 10
    batches_per_epoch: int | None = None
    selection: str = "argmax"
    order: str = "curriculum"
    gamma: float | None = None
    cvi_space: str = "cross"


@dataclass
class UpdateSection:
    epochs: int = 20
    batch_size: int = 128


@dataclass
class MemorySection:
    capacity: int = 200
    enabled: bool = True


@dataclass
class StreamSection:
    mode: str = "single"
    C: int = 4
    T: int = 4
    k_range: list = field(default_factory=lambda: [2, 3])
    holdout_fraction: float = 0.2
    p_disappear: float = 0.3


@dataclass
class MetricsSection:
    lambda_r: float = 0.5
    a_star: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pacing: PacingConfig = field(default_factory=PacingConfig)
    train: TrainSection = field(default_factory=TrainSection)
    detect: DetectSection = field(default_factory=DetectSection)
    update: UpdateSection = field(default_factory=UpdateSection)
    memory: MemorySection = field(default_factory=MemorySection)
    stream: StreamSection = field(default_factory=StreamSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    query_percent: float = 100.0
    standardize: str = "feature"  # feature | global | none
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None

    # -- (de)serialisation ---------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        doc = dict(doc)
        flat = doc.pop("params", {}) or {}
        for key, value in doc.items():
            cfg = cfg.with_value(key, value)
        for key, value in flat.items():
            cfg = cfg.with_value(resolve_key(key), value)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def with_value(self, path: str, value) -> "RunConfig":
        """Copy with ``path`` (``"loss.alpha"`` or a whole section name) set to ``value``."""
        head, _, rest = path.partition(".")
        names = {f.name for f in dataclasses.fields(self)}
        if head not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(self, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"{head!r} has no sub-keys")
            sub = {f.name for f in dataclasses.fields(current)}
            if rest not in sub:
                raise ConfigError(f"unknown config key {path!r}")
            try:
                new = dataclasses.replace(current, **{rest: value})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {path!r}: {exc}") from exc
            return dataclasses.replace(self, **{head: new})
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"section {head!r} must be an object")
            cfg = self
            for k, v in value.items():
                cfg = cfg.with_value(f"{head}.{k}", v)
            return cfg
        return dataclasses.replace(self, **{head: value})

    def detection_config(self) -> DetectionConfig:
        return DetectionConfig(loss=self.loss, pacing=self.pacing, optimizer=self.optimizer,
                               weighting=WeightingConfig(self.detect.gamma),
                               epochs=self.detect.epochs,
                               batches_per_epoch=self.detect.batches_per_epoch,
                               selection=self.detect.selection, order=self.detect.order,
                               cvi_space=self.detect.cvi_space)


def _short_names():
    table = {}
    for section in dataclasses.fields(RunConfig):
        value = getattr(RunConfig(), section.name)
        if dataclasses.is_dataclass(value):
            for f in dataclasses.fields(value):
                table.setdefault(f.name, []).append(f"{section.name}.{f.name}")
        else:
            table.setdefault(section.name, []).append(section.name)
    return table


_ALIASES = {"lr": "optimizer.learning_rate", "beta": "train.ema_beta",
            "weight_decay": "optimizer.weight_decay", "momentum": "optimizer.momentum"}


def resolve_key(key: str) -> str:
    """Map a flat ``params`` key (``alpha``, ``lambda1``, ``lr``...) to a dotted path."""
    if "." in key:
        return key
    if key in _ALIASES:
        return _ALIASES[key]
    hits = _short_names().get(key, [])
    if len(hits) != 1:
        raise ConfigError(f"parameter {key!r} is unknown or ambiguous ({hits})")
    return hits[0]


# -- data ----------------------------------------------------------------

def load_dataset(section: DatasetSection, seed: int) -> data_mod.Dataset:
    if section.kind == "synthetic":
        ds = data_mod.gen_synthetic(section.num_classes, section.per_class, section.dim,
                                    section.spread, section.separation,
                                    seed if section.seed is None else section.seed)
    elif section.kind == "csv":
        if not section.path:
            raise ConfigError("dataset.path is required for csv datasets")
        ds = data_mod.load_csv(section.path)
    elif section.kind == "idx":
        if not (section.images and section.labels):
            raise ConfigError("dataset.images and dataset.labels are required for idx datasets")
        ds = data_mod.load_idx(section.images, section.labels)
    else:
        raise ConfigError(f"unknown dataset kind {section.kind!r}")
    if section.limit is not None and section.limit < len(ds):
        ds = ds.subset(np.arange(section.limit))
    return ds


def fit_standardizer(mode, inputs):
    """``None`` when ``mode`` is ``"none"``; otherwise a fitted Standardizer."""
    if mode == "none":
        return None
    if mode not in ("feature", "global"):
        raise ConfigError(f"standardize must be 'feature', 'global' or 'none', got {mode!r}")
    return data_mod.Standardizer.fit(inputs, mode)


# -- evaluation helpers --------------------------------------------------

def holdout_accuracy(model, prototypes: PrototypeSet, inputs, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = nearest_prototype(model.embed(inputs), prototypes)
    return float(np.mean(pred == np.asarray(labels)))


def _stage_accuracies(model, protos, X, y, stage_of, n_stages):
    row = []
    for n in range(n_stages):
        mask = np.asarray([stage_of.get(int(c), -1) == n for c in y], dtype=bool)
        row.append(holdout_accuracy(model, protos, X[mask], y[mask]) if mask.any()
                   else float("nan"))
    return row


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return None if np.isnan(v) else v


def window_metrics(pseudo, truth, scores, known_ids, lambda_r):
    truth = np.asarray(truth)
    is_novel = ~np.isin(truth, np.asarray(known_ids, dtype=truth.dtype))
    try:
        roc = auroc(scores, is_novel)
    except UndefinedMetricError:
        roc = None
    return {
        "na": normalized_accuracy(pseudo, truth, known_ids, lambda_r),
        "macro_f": macro_f(pseudo, truth, known_ids),
        "micro_f": micro_f(pseudo, truth, known_ids),
        "auroc": roc,
        "k_true": int(np.unique(truth[is_novel]).size),
    }


# -- the loop ------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    metrics: dict
    manifest: object
    reports: list
    model: object
    prototypes: PrototypeSet
    memory: MemoryBuffer
    standardizer: object
    projection: list
    timing: dict

    def checkpoint_json(self, alpha) -> str:
        doc = checkpoint_dict(self.model, self.prototypes, alpha)
        if self.standardizer is not None:
            doc["input_transform"] = self.standardizer.to_dict()
        return json.dumps(doc)


def _stage(t, name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (CILFError, ValueError, ArithmeticError) as exc:
        raise PipelineError(t, name, exc) from exc


def run_seed(config: RunConfig, seed: int, dataset: data_mod.Dataset | None = None) -> RunResult:
    """One full stream for one seed; no files are written."""
    timing = {}
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else _stage(0, "load", load_dataset, config.dataset, seed)
    sc = config.stream
    manifest = _stage(0, "manifest", build_manifest, ds.labels, sc.mode, sc.C, sc.T,
                      tuple(sc.k_range), seed, sc.holdout_fraction, sc.p_disappear)

    X_raw = ds.inputs
    std = fit_standardizer(config.standardize, X_raw[manifest.initial_indices])
    X = std(X_raw) if std is not None else X_raw
    ds_scaled = data_mod.Dataset(X, ds.labels, ds.class_names)
    X0, y0 = X[manifest.initial_indices], ds.labels[manifest.initial_indices]
    Xh, yh = X[manifest.holdout_indices], ds.labels[manifest.holdout_indices]

    enc_cfg = EncoderConfig(X.shape[1], tuple(config.encoder.hidden_dims),
                            config.encoder.embedding_dim,
                            init_seed=seed if config.encoder.init_seed is None
                            else config.encoder.init_seed)
    model, protos = _stage(0, "train_initial", train_initial, X0, y0, enc_cfg, config.loss,
                           config.optimizer, config.train.epochs, config.train.batch_size, seed,
                           config.train.ema_beta)
    timing["train_initial"] = time.perf_counter() - t0

    if config.memory.enabled:
        memory = _stage(0, "init_memory", init_memory, X0, y0, config.memory.capacity, seed)
    else:
        memory = MemoryBuffer(config.memory.capacity)

    stage_of = manifest.introduced_at()
    ledger = ForgettingLedger()
    ledger.add_row(_stage_accuracies(model, protos, Xh, yh, stage_of, 1))

    a_star = 1.0
    if config.metrics.a_star:
        t1 = time.perf_counter()
        stream_rows = np.concatenate([manifest.initial_indices] +
                                     [w.indices for w in manifest.windows])
        m_star, p_star = _stage(0, "a_star", train_initial, X[stream_rows],
                                ds.labels[stream_rows], enc_cfg, config.loss, config.optimizer,
                                config.train.epochs, config.train.batch_size, seed,
                                config.train.ema_beta)
        a_star = holdout_accuracy(m_star, p_star, Xh, yh)
        timing["a_star"] = time.perf_counter() - t1

    det_cfg = config.detection_config()
    windows, reports, projection = [], [], []
    for t in range(1, manifest.T + 1):
        tw = time.perf_counter()
        batch, truth = _stage(t, "next_window", next_window, manifest, ds_scaled, t)
        known = protos.ids
        reference = (memory.inputs, memory.labels) if len(memory) else None
        report = _stage(t, "detect", estimate_classes, model, protos, batch.inputs,
                        config.detect.k_max, det_cfg, seed * 100 + t, reference)
        reports.append(report)
        entry = {"t": t}
        entry.update(_stage(t, "metrics", window_metrics, report.pseudo_labels, truth.labels,
                            report.novelty_scores, known, config.metrics.lambda_r))
        entry["k_star"] = int(report.k_star)
        entry["cvi"] = {str(k): float(v) for k, v in sorted(report.cvi.items())}
        projection.extend(data_mod.export_projection(report.embeddings, truth.labels,
                                                     report.pseudo_labels, t))

        detected = np.flatnonzero(report.novel_mask)
        q = _stage(t, "query", query_labels, detected, config.query_percent, truth, known,
                   seed * 100 + t)
        entry["queried"] = len(q)
        upd = _stage(t, "update", incremental_update, model, protos,
                     batch.inputs[q.novel.positions], q.novel.labels,
                     memory if config.memory.enabled else None, config.loss, config.optimizer,
                     config.update.epochs, config.update.batch_size, seed * 100 + t,
                     batch.inputs[q.known.positions], q.known.labels)
        model, protos = upd.model, upd.prototypes
        if config.memory.enabled and len(q.novel):
            memory = _stage(t, "rebalance", rebalance_memory, memory,
                            batch.inputs[q.novel.positions], q.novel.labels, None,
                            seed * 100 + t)
        ledger.add_row(_stage_accuracies(model, protos, Xh, yh, stage_of, t + 1))
        windows.append(entry)
        timing[f"window_{t}"] = time.perf_counter() - tw

    ledger.a_star = a_star
    try:
        A, forget = forgetting(ledger)
    except UndefinedMetricError:
        A, forget = [], None
    metrics = {
        "seed": int(seed),
        "windows": [{k: (_clean(v) if isinstance(v, float) or v is None else v)
                     for k, v in w.items()} for w in windows],
        "A_m": A,
        "forgetting": forget,
        "a_star": a_star,
        "acc": [[_clean(v) for v in row] for row in ledger.acc],
    }
    timing["total"] = time.perf_counter() - t0
    return RunResult(seed, metrics, manifest, reports, model, protos, memory, std, projection,
                     timing)


def write_outputs(result: RunResult, out_dir, alpha):
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(result.manifest.to_json(), encoding="utf-8")
    for t, rep in enumerate(result.reports, start=1):
        (out / "reports" / f"window_{t}.json").write_text(json.dumps(rep.to_dict()),
                                                          encoding="utf-8")
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=1), encoding="utf-8")
    (out / "checkpoint.json").write_text(result.checkpoint_json(alpha), encoding="utf-8")
    state = {"known_classes": result.prototypes.ids, "memory": result.memory.to_dict()}
    if result.standardizer is not None:
        state["input_transform"] = result.standardizer.to_dict()
    (out / "state.json").write_text(json.dumps(state), encoding="utf-8")
    (out / "projection.csv").write_text(data_mod.projection_csv(result.projection),
                                        encoding="utf-8")
    (out / "timing.json").write_text(json.dumps(result.timing, indent=1), encoding="utf-8")


def run_pipeline(config: RunConfig) -> list:
    """Run every configured seed; write ``<output_dir>/seed_<s>/`` when an output dir is set."""
    results = []
    for seed in config.seeds:
        res = run_seed(config, int(seed))
        if config.output_dir:
            write_outputs(res, Path(config.output_dir) / f"seed_{int(seed)}", config.loss.alpha)
        results.append(res)
    if config.output_dir:
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.output_dir) / "config.json").write_text(
            json.dumps(config.to_dict(), indent=1, default=list), encoding="utf-8")
    return results
