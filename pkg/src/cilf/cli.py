"""Command-line entry point.

Every subcommand accepts ``--config run.json`` plus dotted overrides that
mirror RunConfig paths, e.g. ``--loss.alpha 0.3 --stream.mode multiple``.
Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .detector import estimate_classes
from .encoder import EncoderConfig, checkpoint_dict, load_checkpoint
from .errors import CILFError, ConfigError, DataError, UsageError
from .metrics import auroc
from .pipeline import (RunConfig, fit_standardizer, holdout_accuracy, load_dataset, run_pipeline,
                       write_outputs)
from .prototypes import nearest_prototype
from .stream import StreamManifest
from .training import train_initial
from .updater import MemoryBuffer, incremental_update, init_memory, rebalance_memory

log = logging.getLogger("cilf")


# -- config plumbing -----------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens) -> list:
    """``["--loss.alpha", "0.5", "--seeds=[0,1]"]`` -> ``[("loss.alpha", 0.5), ("seeds", [0, 1])]``."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok!r} needs a value")
            value = tokens[i + 1]
            i += 2
        out.append((key, _parse_value(value)))
    return out


def build_config(config_path, overrides) -> RunConfig:
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        cfg = RunConfig.from_json(text)
    else:
        cfg = RunConfig()
    for key, value in parse_overrides(overrides):
        cfg = cfg.with_value(key, value)
    return cfg


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON: {exc}") from exc


def _load_model(path):
    model, protos, alpha = load_checkpoint(path)
    doc = _read_json(path, "checkpoint")
    std = data_mod.Standardizer.from_dict(doc["input_transform"]) \
        if "input_transform" in doc else None
    return model, protos, alpha, std


def _write_checkpoint(path, model, protos, alpha, std):
    doc = checkpoint_dict(model, protos, alpha)
    if std is not None:
        doc["input_transform"] = std.to_dict()
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def _load_csv(path):
    try:
        return data_mod.load_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _emit(doc, out):
    text = json.dumps(doc, indent=1)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        print(text)


# -- subcommands ---------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    ds = load_dataset(cfg.dataset, cfg.seeds[0])
    text = data_mod.dataset_to_csv(ds)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_train(args, cfg: RunConfig):
    seed = int(cfg.seeds[0])
    ds = load_dataset(cfg.dataset, seed)
    std = fit_standardizer(cfg.standardize, ds.inputs)
    X = std(ds.inputs) if std is not None else ds.inputs
    enc = EncoderConfig(X.shape[1], tuple(cfg.encoder.hidden_dims), cfg.encoder.embedding_dim,
                        init_seed=seed if cfg.encoder.init_seed is None else cfg.encoder.init_seed)
    model, protos = train_initial(X, ds.labels, enc, cfg.loss, cfg.optimizer, cfg.train.epochs,
                                  cfg.train.batch_size, seed, cfg.train.ema_beta)
    _write_checkpoint(args.out, model, protos, cfg.loss.alpha, std)
    if args.state:
        memory = init_memory(X, ds.labels, cfg.memory.capacity, seed)
        state = {"known_classes": protos.ids, "memory": memory.to_dict()}
        Path(args.state).write_text(json.dumps(state), encoding="utf-8")
    print(json.dumps({"classes": protos.ids,
                      "train_accuracy": holdout_accuracy(model, protos, X, ds.labels)}))


def cmd_stream(args, cfg: RunConfig):
    if args.output_dir:
        cfg = cfg.with_value("output_dir", args.output_dir)
    if not cfg.output_dir:
        raise ConfigError("stream needs an output directory (--output-dir or output_dir)")
    results = run_pipeline(cfg)
    for res in results:
        print(json.dumps({"seed": res.seed, "forgetting": res.metrics["forgetting"],
                          "windows": [{k: w[k] for k in ("t", "na", "auroc", "k_star", "k_true")}
                                      for w in res.metrics["windows"]]}))


def cmd_detect(args, cfg: RunConfig):
    model, protos, alpha, std = _load_model(args.checkpoint)
    ds = _load_csv(args.data)
    X = std(ds.inputs) if std is not None else ds.inputs
    reference = None
    if args.state:
        memory = MemoryBuffer.from_dict(_read_json(args.state, "state")["memory"])
        if len(memory):
            reference = (memory.inputs, memory.labels)
    cfg = cfg.with_value("loss.alpha", alpha)
    report = estimate_classes(model, protos, X, cfg.detect.k_max, cfg.detection_config(),
                              int(cfg.seeds[0]), reference)
    _emit(report.to_dict(), args.out)


def cmd_update(args, cfg: RunConfig):
    model, protos, alpha, std = _load_model(args.checkpoint)
    ds = _load_csv(args.data)
    X = std(ds.inputs) if std is not None else ds.inputs
    state = _read_json(args.state, "state") if args.state else None
    memory = MemoryBuffer.from_dict(state["memory"]) if state else None
    known = set(protos.ids)
    is_new = ~np.isin(ds.labels, list(known))
    cfg = cfg.with_value("loss.alpha", alpha)
    seed = int(cfg.seeds[0])
    upd = incremental_update(model, protos, X[is_new], ds.labels[is_new], memory, cfg.loss,
                             cfg.optimizer, cfg.update.epochs, cfg.update.batch_size, seed,
                             X[~is_new], ds.labels[~is_new])
    _write_checkpoint(args.out, upd.model, upd.prototypes, alpha, std)
    if state is not None and args.state_out:
        if is_new.any():
            memory = rebalance_memory(memory, X[is_new], ds.labels[is_new], None, seed)
        new_state = dict(state, known_classes=upd.known_ids, memory=memory.to_dict())
        Path(args.state_out).write_text(json.dumps(new_state), encoding="utf-8")
    print(json.dumps({"classes": upd.known_ids, "new_classes":
                      sorted(int(c) for c in np.unique(ds.labels[is_new]))}))


def cmd_evaluate(args, cfg: RunConfig):
    model, protos, alpha, std = _load_model(args.checkpoint)
    ds = _load_csv(args.data)
    X = std(ds.inputs) if std is not None else ds.inputs
    E = model.embed(X)
    known = np.isin(ds.labels, protos.ids)
    out = {"n": len(ds), "known_fraction": float(known.mean())}
    if known.any():
        pred = nearest_prototype(E[known], protos)
        out["accuracy_known"] = float(np.mean(pred == ds.labels[known]))
        out["per_class"] = {str(c): float(np.mean(pred[ds.labels[known] == c] == c))
                            for c in np.unique(ds.labels[known])}
    if known.any() and (~known).any():
        scores = ((E[:, None, :] - protos.matrix()[None]) ** 2).sum(-1).min(axis=1)
        out["auroc"] = auroc(scores, ~known)
    _emit(out, args.out)


def _summary(doc) -> dict:
    if "layers" in doc and "version" in doc:
        return {"kind": "checkpoint", "version": doc["version"], "config": doc["config"],
                "layers": [f"{l['rows']}x{l['cols']}" for l in doc["layers"]],
                "classes": sorted(int(c) for c in doc["prototypes"]), "alpha": doc["alpha"],
                "standardized": "input_transform" in doc}
    if "windows" in doc and "initial_classes" in doc:
        m = StreamManifest.from_dict(doc)
        return {"kind": "manifest", "seed": m.seed, "mode": m.mode,
                "initial_classes": m.initial_classes,
                "windows": [{"t": w.t, "novel": w.novel, "disappeared": w.disappeared,
                             "size": sum(w.present.values())} for w in m.windows]}
    if "windows" in doc and "forgetting" in doc:
        return {"kind": "metrics", "seed": doc["seed"], "forgetting": doc["forgetting"],
                "A_m": doc["A_m"],
                "windows": [{k: w.get(k) for k in ("t", "na", "auroc", "k_star", "k_true")}
                            for w in doc["windows"]]}
    if "memory" in doc and "known_classes" in doc:
        mem = MemoryBuffer.from_dict(doc["memory"])
        return {"kind": "state", "known_classes": doc["known_classes"],
                "memory": {"capacity": mem.capacity, "per_class": mem.per_class()}}
    raise DataError("file is not a checkpoint, manifest, metrics or state document")


def cmd_inspect(args, cfg: RunConfig):
    print(json.dumps(_summary(_read_json(args.path, "file")), indent=1))


# -- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cilf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run configuration")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic dataset as CSV")
    sp.add_argument("--out")
    sp = add("train", cmd_train, "initial training on a labelled dataset")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--state", help="also write a state file with initial memory")
    sp = add("stream", cmd_stream, "run the full streaming pipeline")
    sp.add_argument("--output-dir")
    sp = add("detect", cmd_detect, "estimate novel classes in one window")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="CSV window (labels are ignored)")
    sp.add_argument("--state", help="state file whose memory serves as reference")
    sp.add_argument("--out")
    sp = add("update", cmd_update, "incremental update with labelled new-class data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--state")
    sp.add_argument("--state-out")
    sp.add_argument("--out", required=True)
    sp = add("evaluate", cmd_evaluate, "score a checkpoint on a labelled CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp = add("inspect", cmd_inspect, "summarise a checkpoint, manifest, metrics or state file")
    sp.add_argument("path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, rest)
        args.func(args, cfg)
    except CILFError as exc:
        print(f"cilf: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"cilf: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (UsageError, TypeError) as exc:
        print(f"cilf: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
