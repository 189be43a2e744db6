"""Adam with bias correction and per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> None:
    """Update ``params`` in place. ``None`` grads count as zero."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state are not aligned")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step_count
    corr2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)


class Adam:
    """Adam over one or more parameter groups, each with its own learning rate."""

    def __init__(self, groups, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups), "lr": lr}]
        self.groups = []
        for g in groups:
            state = AdamState(lr=g.get("lr", lr), beta1=betas[0], beta2=betas[1], epsilon=eps)
            self.groups.append((list(g["params"]), state))

    def step(self) -> None:
        for params, state in self.groups:
            adam_step([p.data for p in params], [p.grad for p in params], state)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None
