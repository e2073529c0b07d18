"""SGD with weight decay and a linear-warmup / cosine-decay learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class SgdConfig:
    base_lr: float = 3e-2
    weight_decay: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 2000
    momentum: float = 0.0

    def validate(self) -> None:
        if not self.base_lr > 0:
            raise ConfigError(f"sgd.base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"sgd.weight_decay must be >= 0, got {self.weight_decay}")
        if self.total_steps < 1:
            raise ConfigError(f"sgd.total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"sgd.warmup_steps must lie in [0, total_steps={self.total_steps}], got {self.warmup_steps}"
            )
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"sgd.momentum must lie in [0, 1), got {self.momentum}")


def learning_rate(cfg: SgdConfig, step: int) -> float:
    """Learning rate at ``step``; steps past ``total_steps`` keep the final value (0)."""
    step = min(step, cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return 0.0 if step >= cfg.total_steps else cfg.base_lr
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Plain SGD over a fixed, ordered list of parameters.

    Update: ``v <- momentum * v + (grad + weight_decay * p)``; ``p <- p - lr * v``.
    With the default momentum of 0 this is ``p <- p - lr * (grad + wd * p)``.
    """

    def __init__(self, params: Iterable[Tensor], cfg: SgdConfig):
        cfg.validate()
        self.params = list(params)
        self.cfg = cfg
        self.velocity: list[np.ndarray] | None = (
            [np.zeros_like(p.data) for p in self.params] if cfg.momentum > 0 else None
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, step: int) -> float:
        lr = learning_rate(self.cfg, step)
        wd = self.cfg.weight_decay
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            update = g + wd * p.data
            if self.velocity is not None:
                self.velocity[i] = self.cfg.momentum * self.velocity[i] + update
                update = self.velocity[i]
            p.data = p.data - lr * update
        return lr


def sgd_step(params: Iterable[Tensor], cfg: SgdConfig, step: int) -> float:
    """One momentum-free SGD update in place; returns the learning rate used."""
    lr = learning_rate(cfg, step)
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        p.data = p.data - lr * (g + cfg.weight_decay * p.data)
    return lr
