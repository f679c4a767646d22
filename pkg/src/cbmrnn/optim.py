"""Xavier initialization, Adam with decoupled weight decay, plateau LR decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def fans(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"fan-in/fan-out undefined for shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {shape}")
    return fan_in, fan_out


def xavier_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot initialization.  Conv kernels [out, in, kh, kw] count
    the kernel area into both fans."""
    bound = xavier_bound(shape)
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Bias-corrected Adam.  Weight decay is decoupled: parameters shrink by
    ``lr * weight_decay`` before the moment-based step is applied."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            beta1=beta1, beta2=beta2, eps=eps,
        )

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = []
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                name = p.name or f"param{i}"
                raise FloatingPointError(f"non-finite gradient for {name}")
            grads.append(g)
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class LrSchedule:
    """Multiply the rate by ``factor`` once ``patience`` epochs pass without
    the monitored loss improving on its best value."""

    base: float = 1e-4
    factor: float = 0.5
    patience: int = 3
    rate: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    stale: int = field(init=False, default=0)

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.factor <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        self.rate = self.base

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.rate *= self.factor
                self.stale = 0
        return self.rate


def lr_decay_step(schedule: LrSchedule, loss: float) -> float:
    return schedule.step(loss)
