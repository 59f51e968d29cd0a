"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a gradient goes non-finite; the update is rejected."""


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators and a step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update over matched lists of parameter tensors and gradients.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates. A non-finite gradient rejects the whole
    update and raises DivergenceError, leaving params and state untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_steps <= 0 or self.floor_lr < 0:
            raise ValueError("invalid schedule parameters")
        if self.floor_lr > self.base_lr:
            raise ValueError("floor_lr exceeds base_lr")


def cosine_lr(step, sched):
    """Half-cosine decay from base_lr at step 0 to floor_lr at total_steps.

    Out-of-range steps clamp to the endpoints.
    """
    s = min(max(step, 0), sched.total_steps)
    frac = 0.5 * (1.0 + math.cos(math.pi * s / sched.total_steps))
    return sched.floor_lr + (sched.base_lr - sched.floor_lr) * frac


class AdamW:
    """Stateful wrapper around adamw_step for training loops."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def step(self, lr=None):
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        adamw_step(
            self.params,
            grads,
            self.state,
            self.lr if lr is None else lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
