"""SGD with Nesterov momentum and a central-difference gradient oracle.

Parameters are handled as lists of float64 numpy arrays ("blocks").
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class OptimizerState:
    velocity: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params])


def _check_shapes(params, grads, velocity):
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError(
            f"block count mismatch: {len(params)} params, {len(grads)} grads, "
            f"{len(velocity)} velocities")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(
                f"block {i}: param {p.shape}, grad {g.shape}, velocity {v.shape}")


def lookahead(params, state: OptimizerState, cfg: OptimizerConfig):
    """Point at which the next gradient must be evaluated: theta + momentum * v."""
    if not state.velocity:
        return [np.array(p, dtype=np.float64) for p in params]
    return [p + cfg.momentum * v for p, v in zip(params, state.velocity)]


def sgd_nesterov_step(params, grads, state: OptimizerState | None, cfg: OptimizerConfig):
    """One Nesterov step (Sutskever form).

    ``grads`` must be taken at ``lookahead(params, state, cfg)``. Weight decay is
    added to the gradient before the momentum update. Returns new parameter
    blocks and a new state; inputs are left untouched.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if state is None or not state.velocity:
        state = OptimizerState.zeros_like(params)
    _check_shapes(params, grads, state.velocity)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {i}")

    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, state.velocity):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        v_new = cfg.momentum * v - cfg.learning_rate * g
        new_velocity.append(v_new)
        new_params.append(p + v_new)
    return new_params, OptimizerState(new_velocity)


def finite_diff_grad(loss_fn: Callable[[list], float], params, step: float = 1e-5):
    """Central-difference gradient of a scalar function of parameter blocks."""
    if not step > 0:
        raise UsageError("finite-difference step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for b, block in enumerate(params):
        g = np.zeros_like(block)
        flat = block.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(loss_fn(params))
            flat[k] = orig - step
            down = float(loss_fn(params))
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing block {b}, entry {k}")
            gflat[k] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a, b) -> float:
    """Norm-wise relative error between two arrays or two lists of blocks."""
    fa = np.concatenate([np.ravel(x) for x in a]) if len(a) else np.zeros(0)
    fb = np.concatenate([np.ravel(x) for x in b]) if len(b) else np.zeros(0)
    denom = max(np.linalg.norm(fa), np.linalg.norm(fb), 1e-12)
    return float(np.linalg.norm(fa - fb) / denom)
