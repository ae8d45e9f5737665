"""SGD with momentum, L2 weight decay, and cosine learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int = 0
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step, self.total_steps)


def sgd_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """v <- mu*v + grad + wd*param; param <- param - lr(t)*v; t <- t+1.

    Parameters with no gradient this step are treated as grad == 0 (their
    velocity still decays and weight decay still applies).
    """
    lr = state.lr()
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"sgd_step: non-finite gradient for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        v *= state.momentum
        v += grad
        if state.weight_decay != 0.0:
            v += state.weight_decay * p.data
        p.data = p.data - lr * v
    state.step += 1
