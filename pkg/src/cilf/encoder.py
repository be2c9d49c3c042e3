"""Multilayer perceptron embedding network with hand-written backprop."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointShapeError, CheckpointVersionError, MalformedCheckpointError,
                     ShapeError, UsageError)
from .prototypes import PrototypeSet

CHECKPOINT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (128, 64)
    embedding_dim: int = 32
    nonlinearity: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embedding_dim)
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"all layer widths must be >= 1, got {dims}")
        if self.nonlinearity != "relu":
            raise UsageError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.embedding_dim)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


class EncoderModel:
    """Weights are stored as ``(fan_in, fan_out)`` matrices, so ``h = x @ W + b``.

    Parameter blocks are ordered ``[W0, b0, W1, b1, ...]``. Hidden layers use a
    rectifier; the output layer is linear.
    """

    def __init__(self, config: EncoderConfig, params):
        self.config = config
        self._revision = 0
        self.params = params

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, blocks):
        blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        dims = self.config.layer_dims
        if len(blocks) != 2 * (len(dims) - 1):
            raise ShapeError(f"expected {2 * (len(dims) - 1)} parameter blocks, got {len(blocks)}")
        for i in range(len(dims) - 1):
            W, b = blocks[2 * i], blocks[2 * i + 1]
            if W.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected W{(dims[i], dims[i + 1])} b{(dims[i + 1],)}, "
                    f"got W{W.shape} b{b.shape}")
        self._params = blocks
        self._revision += 1

    @property
    def n_layers(self):
        return len(self._params) // 2

    def layer_shapes(self):
        return [self._params[2 * i].shape for i in range(self.n_layers)]

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, [p.copy() for p in self._params])

    def with_params(self, params) -> "EncoderModel":
        return EncoderModel(self.config, params)

    def embed(self, inputs) -> np.ndarray:
        return forward(self, inputs)[0]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    model_id: int = 0
    revision: int = 0


def init_model(cfg: EncoderConfig) -> EncoderModel:
    """Uniform fan-in/fan-out initialisation; biases start at zero."""
    rng = np.random.default_rng(cfg.init_seed)
    dims = cfg.layer_dims
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return EncoderModel(cfg, params)


def forward(model: EncoderModel, inputs):
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.config.input_dim:
        raise ShapeError(f"input width {x.shape[1]} does not match encoder input_dim "
                         f"{model.config.input_dim}")
    cache = ForwardCache(inputs=x, model_id=id(model), revision=model._revision)
    h = x
    last = model.n_layers - 1
    for i in range(model.n_layers):
        cache.activations.append(h)
        z = h @ model.params[2 * i] + model.params[2 * i + 1]
        cache.pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def backward(model: EncoderModel, cache: ForwardCache | None, upstream) -> list:
    """Gradients of a scalar loss w.r.t. every parameter block, given dL/d(embeddings)."""
    if cache is None:
        raise UsageError("backward called without a forward cache")
    if cache.model_id != id(model) or cache.revision != model._revision:
        raise UsageError("forward cache is stale: the model changed since the forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre_activations[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match embeddings "
                         f"{cache.pre_activations[-1].shape}")
    grads = [None] * len(model.params)
    for i in reversed(range(model.n_layers)):
        if i != model.n_layers - 1:
            g = g * (cache.pre_activations[i] > 0)
        grads[2 * i] = cache.activations[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            g = g @ model.params[2 * i].T
    return grads


def input_jacobian(model: EncoderModel, x) -> np.ndarray:
    """(e, d) Jacobian of the embedding of a single input."""
    _, cache = forward(model, x)
    J = None
    for i in reversed(range(model.n_layers)):
        W = model.params[2 * i]
        if i != model.n_layers - 1:
            mask = (cache.pre_activations[i][0] > 0).astype(float)
            J = J * mask[None, :]
        J = W.T if J is None else J @ W.T
    return J


# -- checkpoints -----------------------------------------------------------

def checkpoint_dict(model: EncoderModel, prototypes: PrototypeSet | None, alpha: float = 0.3):
    prototypes = prototypes if prototypes is not None else PrototypeSet()
    layers = []
    for i in range(model.n_layers):
        W, b = model.params[2 * i], model.params[2 * i + 1]
        layers.append({"rows": int(W.shape[0]), "cols": int(W.shape[1]),
                       "weights": [float(v) for v in W.ravel()],
                       "bias": [float(v) for v in b]})
    return {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "layers": layers,
        "prototypes": {str(c): [float(v) for v in prototypes[c]] for c in prototypes.ids},
        "alpha": float(alpha),
        "ema_beta": float(prototypes.ema_beta),
    }


def dumps_checkpoint(model, prototypes, alpha=0.3) -> str:
    return json.dumps(checkpoint_dict(model, prototypes, alpha))


def save_checkpoint(model, prototypes, path, alpha=0.3):
    Path(path).write_text(dumps_checkpoint(model, prototypes, alpha), encoding="utf-8")


def loads_checkpoint(text: str):
    """Parse checkpoint JSON. Returns ``(model, prototypes, alpha)``."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedCheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise MalformedCheckpointError("checkpoint lacks a version field")
    if doc["version"] not in SUPPORTED_VERSIONS:
        raise CheckpointVersionError(
            f"checkpoint version {doc['version']!r} is not supported "
            f"(supported versions: {', '.join(map(str, SUPPORTED_VERSIONS))})")
    try:
        cfg_doc = dict(doc["config"])
        cfg_doc["hidden_dims"] = tuple(cfg_doc.get("hidden_dims", ()))
        cfg = EncoderConfig(**cfg_doc)
        params = []
        for layer in doc["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["weights"], dtype=np.float64)
            b = np.asarray(layer["bias"], dtype=np.float64)
            if w.size != rows * cols or b.size != cols:
                raise CheckpointShapeError(
                    f"layer declares {rows}x{cols} but carries {w.size} weights and "
                    f"{b.size} biases")
            params.append(w.reshape(rows, cols))
            params.append(b)
        protos = {int(k): v for k, v in doc["prototypes"].items()}
        alpha = float(doc["alpha"])
        beta = float(doc.get("ema_beta", 0.8))
    except CheckpointShapeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ShapeError):
            raise CheckpointShapeError(str(exc)) from exc
        raise MalformedCheckpointError(f"checkpoint is missing or has bad fields: {exc}") from exc
    try:
        model = EncoderModel(cfg, params)
    except ShapeError as exc:
        raise CheckpointShapeError(str(exc)) from exc
    if any(len(v) != cfg.embedding_dim for v in protos.values()):
        raise CheckpointShapeError("prototype length differs from embedding_dim")
    return model, PrototypeSet(protos, beta), alpha


def load_checkpoint(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedCheckpointError(f"checkpoint is not UTF-8: {exc}") from exc
    return loads_checkpoint(text)
