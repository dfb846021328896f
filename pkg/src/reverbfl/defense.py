"""Server-side reserve pretraining and post-aggregation reserve retraining."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks as A
from . import model as M

MODES = ("disabled", "clean", "fgsm", "pgd", "awgn", "all")
_MODE_ATTACK = {"fgsm": "fgsm", "pgd": "pgd", "awgn": "awgn", "all": "mixed"}


@dataclass
class DefenseConfig:
    mode: str = "disabled"
    reserve_fraction: float = 0.05
    pretrain_epochs: int = 3
    batch_size: int = 32
    optimizer: M.OptimizerState = field(default_factory=M.OptimizerState)
    attack: A.AttackSpec = field(default_factory=A.AttackSpec)
    steps: int | None = None  # None: one epoch over the reserve

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"defense mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.pretrain_epochs < 0:
            raise ValueError("batch_size >= 1 and pretrain_epochs >= 0 required")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def enabled(self):
        return self.mode != "disabled"

    def steps_for(self, reserve_size):
        if self.steps is not None:
            return self.steps
        return math.ceil(reserve_size / self.batch_size)


def _epoch_batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def pretrain(arch, params, reserve, config, rng):
    """``pretrain_epochs`` shuffled passes of clean minibatch training on the reserve."""
    if config.pretrain_epochs == 0:
        return dict(params)
    if reserve is None or len(reserve) == 0:
        raise ValueError("reserve pretraining needs a non-empty reserve set")
    data = reserve.data
    state = config.optimizer.fresh()
    for _ in range(config.pretrain_epochs):
        for idx in _epoch_batches(len(data), config.batch_size, rng):
            params, state, _ = M.train_step(arch, params, state, data.x[idx], data.y[idx], rng)
    return params


def augment_batch(arch, params, x, labels, mode, attack, rng):
    """Clean batch followed by its adversarial copy (labels duplicated); identity for ``clean``."""
    if mode == "disabled":
        raise ValueError("augment_batch is not defined for a disabled defense")
    if mode == "clean":
        return x, labels
    spec = attack.as_kind(_MODE_ATTACK[mode])
    adv = A.poison_batch(arch, params, x, labels, spec, rng)
    return np.concatenate([x, adv]), np.concatenate([labels, labels])


def reserve_retrain(arch, params, reserve, config, rng, round_index=0):
    """``r`` optimizer steps on (augmented) reserve minibatches. Returns ``(params', r)``.

    Moments start empty every round; the learning-rate schedule counts
    ``round_index * r + s``.
    """
    if not config.enabled:
        return params, 0
    if reserve is None or len(reserve) == 0:
        raise ValueError("reserve retraining needs a non-empty reserve set")
    data = reserve.data
    steps = config.steps_for(len(data))
    state = config.optimizer.fresh(step=round_index * steps)
    batches = []
    while len(batches) < steps:
        batches.extend(_epoch_batches(len(data), config.batch_size, rng))
    for idx in batches[:steps]:
        x, y = augment_batch(arch, params, data.x[idx], data.y[idx], config.mode, config.attack, rng)
        params, state, _ = M.train_step(arch, params, state, x, y, rng)
    return params, steps
