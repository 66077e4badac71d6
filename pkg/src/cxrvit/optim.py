"""AdamW with decoupled weight decay, warmup + cosine schedule, and
label-smoothed cross-entropy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("need lr >= 0, eps > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptState,
               hyper: AdamWHyper, lr_t: float) -> None:
    """One in-place AdamW update.

    Decay is applied to the parameter directly (theta -= lr * wd * theta)
    and the bias-corrected Adam step uses the gradient alone.  All
    gradients are checked before anything is modified.
    """
    if lr_t < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state are misaligned")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i}; step rejected")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if p.data.shape != m.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.data.shape}")
        p.data *= 1.0 - lr_t * hyper.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + hyper.eps)).astype(p.data.dtype, copy=False)


class AdamW:
    def __init__(self, params: Sequence[Tensor], hyper: AdamWHyper = AdamWHyper()):
        self.params = list(params)
        self.hyper = hyper
        self.state = OptState.zeros_like(self.params)

    def step(self, lr_t: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.hyper, lr_t)

    def zero_grad(self) -> None:
        ag.zero_grad(self.params)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to ``base_lr`` then half-cosine decay to ``min_lr``."""

    total_steps: int
    warmup_steps: int = 0
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_start_lr: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, schedule: Schedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    s = schedule
    if step < s.warmup_steps:
        return s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def smoothed_targets(targets, num_classes: int, eps: float) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"target out of range [0, {num_classes}): {targets.tolist()}")
    q = np.full((targets.size, num_classes), eps / num_classes)
    q[np.arange(targets.size), targets] += 1.0 - eps
    return q


def label_smoothed_ce(logits: Tensor, targets, eps: float = 0.1) -> Tensor:
    """Batch-mean cross-entropy against (1 - eps) * onehot + eps / K."""
    B, K = logits.shape
    if K < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing eps must lie in [0, 1)")
    q = smoothed_targets(targets, K, eps)
    return -(ag.log_softmax(logits, axis=-1) * q).sum() * (1.0 / B)
