"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor

BASE_LR = 1.5e-4


def scaled_lr(batch_size: int, lr: float = BASE_LR) -> float:
    """Initial learning rate ``lr * batch_size / 4``."""
    return lr * batch_size / 4


def cosine_warmup_lr(step: float, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            weight_decay=weight_decay,
            exp_avg=[np.zeros_like(p.data) for p in self.params],
            exp_avg_sq=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        s = self.state
        if lr is not None:
            s.lr = lr
        if s.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {s.lr}")
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"AdamW: parameter {i} of shape {p.shape} has no gradient")
        adamw_step(s, self.params, [p.grad for p in self.params])


def adamw_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if not state.exp_avg and not state.exp_avg_sq:
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
    if not len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq):
        raise ValueError(
            f"AdamW: {len(params)} parameters, {len(grads)} gradients and {len(state.exp_avg)} moment buffers"
        )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            raise RuntimeError(f"AdamW: missing gradient for parameter of shape {p.shape}")
        g = g.astype(p.dtype, copy=False)
        p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (state.lr / bc1) * m / denom
