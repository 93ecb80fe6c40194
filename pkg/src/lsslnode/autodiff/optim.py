"""AdamW with decoupled weight decay and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWState", "adamw_step", "AdamW", "OneCycleSchedule"]


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> AdamWState:
        return cls(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params], **hyper)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState, lr: float | None = None) -> None:
    """One in-place AdamW update. A missing gradient counts as zero."""
    if len(params) != len(state.m):
        raise ValueError(f"optimizer state holds {len(state.m)} buffers for {len(params)} params")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment buffer shape {m.shape} drifted from parameter shape {p.shape}")
        if g is None:
            g = np.zeros(p.shape)
        p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState.for_params(
            self.params, lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)


@dataclass
class OneCycleSchedule:
    """Cosine warm-up to ``max_lr`` then cosine decay, over ``total_steps`` steps.

    Step 0 uses ``initial_lr``, step ``warmup_fraction * total_steps - 1`` peaks
    at ``max_lr`` and the last step (``total_steps - 1``) uses ``final_lr``.
    """

    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    _peak: float = field(init=False, repr=False)
    _end: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        self._peak = max(self.warmup_fraction * self.total_steps - 1.0, 0.0)
        self._end = max(self.total_steps - 1.0, self._peak + 1.0)

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.initial_lr / self.final_div_factor

    @staticmethod
    def _anneal(start: float, end: float, frac: float) -> float:
        return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))

    def lr(self, step: float) -> float:
        step = min(max(step, 0.0), self._end)
        if step <= self._peak:
            if self._peak == 0.0:
                return self.initial_lr
            return self._anneal(self.initial_lr, self.max_lr, step / self._peak)
        return self._anneal(self.max_lr, self.final_lr, (step - self._peak) / (self._end - self._peak))
