"""Ramp-up, learning-rate decay and MixUp coefficient sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ScheduleConfig:
    total_epochs: int = 600
    lr_const_epochs: int = 400
    rampup_epochs: int = 200
    base_lr: float = 3e-4
    lambda_cons_max: float = 10.0
    alpha: float = 0.1
    ema_k: float = 0.99

    def __post_init__(self):
        if self.total_epochs <= 0 or self.rampup_epochs <= 0 or self.lr_const_epochs <= 0:
            raise ValueError("epoch counts must be positive")
        if self.rampup_epochs > self.total_epochs or self.lr_const_epochs > self.total_epochs:
            raise ValueError("rampup_epochs and lr_const_epochs must not exceed total_epochs")
        if self.base_lr <= 0 or self.alpha <= 0:
            raise ValueError("base_lr and alpha must be positive")
        if self.lambda_cons_max < 0:
            raise ValueError("lambda_cons_max must be non-negative")
        if not 0.0 <= self.ema_k <= 1.0:
            raise ValueError("ema_k must lie in [0, 1]")


def rampup(epoch: int, rampup_epochs: int) -> float:
    """Sigmoid-shaped ramp ``exp(-5 (1 - g)^2)`` with ``g = min(epoch / rampup_epochs, 1)``."""
    if rampup_epochs <= 0:
        raise ValueError(f"rampup_epochs must be positive, got {rampup_epochs}")
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    gamma = min(epoch / rampup_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - gamma) ** 2)


def learning_rate(epoch: int, cfg: ScheduleConfig) -> float:
    """Constant ``base_lr`` then linear decay reaching 0 at ``total_epochs``."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.lr_const_epochs:
        return cfg.base_lr
    return cfg.base_lr * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.lr_const_epochs)


def consistency_weight(epoch: int, cfg: ScheduleConfig) -> float:
    return cfg.lambda_cons_max * rampup(epoch, cfg.rampup_epochs)


def sample_lambda(alpha: float, rng_seed) -> float:
    """One draw from Beta(alpha, alpha) as ``g1 / (g1 + g2)`` with Gamma(alpha, 1) draws."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(rng_seed)
    g1, g2 = rng.standard_gamma(alpha, size=2)
    total = g1 + g2
    if total == 0.0:
        # both gammas underflowed; Beta(a, a) is symmetric so either end is equally likely
        return float(rng.integers(0, 2))
    return float(g1 / total)
