"""AdamW with decoupled weight decay and cosine-annealing schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, NonFiniteGradient, ShapeMismatch


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-decay Adam update, in place on ``params`` and ``state``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    if lr <= 0:
        raise ConfigInvalid(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * p)


@dataclass
class ScheduleConfig:
    base_lr: float
    total_epochs: int
    min_lr: float = 0.0
    cycles: int = 1

    def __post_init__(self):
        if not self.base_lr > self.min_lr >= 0.0:
            raise ConfigInvalid("need base_lr > min_lr >= 0")
        if self.total_epochs < 1 or self.cycles < 1:
            raise ConfigInvalid("total_epochs and cycles must be >= 1")
        if self.total_epochs % self.cycles != 0:
            raise ConfigInvalid("cycles must divide total_epochs for warm restarts")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """Cosine annealing with warm restarts; epoch counts from 0.

    Interior multiples of the cycle length restart at base_lr; the final
    boundary (epoch == total_epochs) is the end of the last cycle, min_lr.
    """
    if not 0 <= epoch <= cfg.total_epochs:
        raise ConfigInvalid(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    cycle_len = cfg.total_epochs // cfg.cycles
    phase = cycle_len if epoch == cfg.total_epochs else epoch % cycle_len
    span = cfg.base_lr - cfg.min_lr
    return cfg.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * phase / cycle_len))
