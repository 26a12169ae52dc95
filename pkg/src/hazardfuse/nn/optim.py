from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}; step rejected")
        self.param = name


@dataclass
class OptimState:
    base_lr: float
    momentum: float = 0.99
    bias_lr_factor: float = 2.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def is_bias(name: str) -> bool:
    return name.endswith(".b")


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      opt: OptimState, layer_multipliers: dict[str, float] | None = None):
    """One in-place momentum SGD step: v <- m*v - lr_eff*g; w <- w + v.

    lr_eff = base_lr * layer multiplier * (bias_lr_factor for biases). Every
    gradient is checked before any parameter moves.
    """
    layer_multipliers = layer_multipliers or {}
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)}")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    for name, w in params.items():
        g = grads[name]
        lr = opt.base_lr * layer_multipliers.get(name, 1.0)
        if is_bias(name):
            lr *= opt.bias_lr_factor
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(w)
        v *= opt.momentum
        v -= w.dtype.type(lr) * g
        w += v
    return params
