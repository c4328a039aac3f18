"""LARS and heavy-ball SGD over name -> array parameter dicts, plus the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def default_exclusion(name: str) -> bool:
    """Biases and normalization parameters skip weight decay and trust scaling."""
    return name.endswith(".bias") or ".norm." in name


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer and schedule settings.

    ``trust_coefficient`` multiplies the LARS ratio ``||w|| / ||g'||``; a
    value of 1 gives the bare ratio.
    """

    base_lr: float = 0.4
    batch_size: int = 256
    K: int = 2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_epochs: int = 10
    total_epochs: int = 100
    steps_per_epoch: int = 1
    trust_coefficient: float = 1e-3
    trust_clip: bool = False
    nesterov: bool = False
    exclude: Callable[[str], bool] = default_exclusion

    def __post_init__(self):
        for name in ("base_lr", "weight_decay", "momentum", "trust_coefficient"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.K < 1:
            raise ValueError("batch_size, steps_per_epoch and K must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def max_lr(cfg: OptimConfig) -> float:
    """Peak learning rate, ``base_lr * batch_size / 256 * K``."""
    return cfg.base_lr * cfg.batch_size / 256.0 * cfg.K


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to :func:`max_lr`, then cosine decay to zero."""
    peak = max_lr(cfg)
    warm, total = cfg.warmup_steps, cfg.total_steps
    step = min(max(step, 0), total)
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def _check(params: dict, grads: dict):
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"shape mismatch for {k}: {np.shape(g)} vs {np.shape(params[k])}")


def trust_ratio(w: np.ndarray, g: np.ndarray, cfg: OptimConfig) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(g))
    if w_norm > 0 and g_norm > 0:
        ratio = cfg.trust_coefficient * w_norm / g_norm
        return min(ratio, 1.0) if cfg.trust_clip else ratio
    return 1.0


def lars_step(params: dict, grads: dict, cfg: OptimConfig, lr: float, buffers: dict) -> dict:
    """One LARS update.  ``buffers`` holds the momentum state and is updated in place.

    Per parameter: ``g' = g + wd * w`` and ``m <- mu * m + eta * lr * g'``,
    then ``w <- w - m``.  Excluded parameters use ``wd = 0`` and ``eta = 1``.
    """
    _check(params, grads)
    out = dict(params)
    for name, g in grads.items():
        w = params[name]
        excluded = cfg.exclude(name)
        gp = g if excluded or cfg.weight_decay == 0 else g + cfg.weight_decay * w
        eta = 1.0 if excluded else trust_ratio(w, gp, cfg)
        m = buffers.get(name)
        m = eta * lr * gp if m is None else cfg.momentum * m + eta * lr * gp
        buffers[name] = m
        out[name] = w - m
    return out


def sgd_momentum_step(params: dict, grads: dict, cfg: OptimConfig, lr: float, buffers: dict) -> dict:
    """Heavy-ball SGD with weight decay on non-excluded parameters."""
    _check(params, grads)
    out = dict(params)
    for name in params:
        w = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if not cfg.exclude(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * w
        m = buffers.get(name)
        m = g if m is None else cfg.momentum * m + g
        buffers[name] = m
        step_dir = g + cfg.momentum * m if cfg.nesterov else m
        out[name] = w - lr * step_dir
    return out
