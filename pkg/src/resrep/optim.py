"""SGD with per-group momentum / weight decay, and cosine learning-rate annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamGroup:
    name: str
    keys: list[str]
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(groups: list[ParamGroup], lr: float, params: dict, grads: dict):
    """v <- momentum*v + (g + wd*p); p <- p - lr*v.  Updates in place, then zeroes the grads."""
    for group in groups:
        for key in group.keys:
            p, g = params[key], grads[key]
            d = g + group.weight_decay * p if group.weight_decay else g.copy()
            v = group.velocity.get(key)
            if v is None:
                v = group.velocity[key] = np.zeros_like(p)
            v *= group.momentum
            v += d
            p -= lr * v
            g[...] = 0


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    total_epochs: int

    def __post_init__(self):
        if self.initial_lr <= 0 or self.total_epochs < 1:
            raise ValueError(f"bad schedule {self}")


def cosine_lr(epoch: int, sched: LrSchedule) -> float:
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    return sched.initial_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / sched.total_epochs))


def default_groups(model, compactor_momentum=0.99, momentum=0.9, weight_decay=1e-4) -> list[ParamGroup]:
    """Conv kernels decay; BN affine and biases do not; compactors get their own momentum and no decay."""
    from .layers import BatchNorm2d, Compactor

    weights, affine, compactors = [], [], []
    for i, node in enumerate(model.nodes):
        for name in node.params:
            key = f"{i}.{name}"
            if isinstance(node, Compactor):
                compactors.append(key)
            elif isinstance(node, BatchNorm2d) or name == "bias":
                affine.append(key)
            else:
                weights.append(key)
    groups = [
        ParamGroup("weights", weights, momentum, weight_decay),
        ParamGroup("affine", affine, momentum, 0.0),
    ]
    if compactors:
        groups.append(ParamGroup("compactors", compactors, compactor_momentum, 0.0))
    return groups
