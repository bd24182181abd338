"""SGD with momentum wrapped in Lookahead, plus the warmup/cosine LR shape.

Lookahead keeps a slow copy of every parameter; after each k inner SGD steps
the slow weights move fraction alpha toward the fast weights and the fast
weights are reset onto them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class LrSchedule:
    """Linear warmup to max_lr, then cosine decay to zero.

    Warmup covers round(warmup_fraction * total_steps) steps (at least one).
    """

    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        self.warmup_steps = max(1, round(self.warmup_fraction * self.total_steps))


def lr_at_step(sched: LrSchedule, step: int) -> float:
    """Learning rate at ``step`` (0 <= step <= total_steps)."""
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step <= sched.warmup_steps:
        return sched.max_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Fast/slow weight pair plus inner-SGD momentum buffers.

    ``fast`` holds the live parameter tensors (shared with the model);
    ``slow`` and ``momentum`` are private copies. ``counter`` counts inner
    steps since the last sync and stays in [0, k).
    """

    fast: dict
    slow: dict
    momentum_buffers: dict
    k: int = 5
    alpha: float = 0.5
    momentum: float = 0.9
    nesterov: bool = False
    counter: int = 0


def init_optimizer(
    params: dict,
    k: int = 5,
    alpha: float = 0.5,
    momentum: float = 0.9,
    nesterov: bool = False,
) -> OptimizerState:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return OptimizerState(
        fast=params,
        slow={name: t.data.copy() for name, t in params.items()},
        momentum_buffers={name: np.zeros_like(t.data) for name, t in params.items()},
        k=k,
        alpha=alpha,
        momentum=momentum,
        nesterov=nesterov,
    )


def sgd_lookahead_step(state: OptimizerState, grads: dict, lr) -> None:
    """One inner SGD(+momentum) step; every k-th call syncs slow weights.

    ``grads`` maps parameter name to gradient array; ``lr`` is a float or a
    per-name mapping. Parameters without an entry in ``grads`` are skipped.
    """
    for name, tensor in state.fast.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {tensor.data.shape} for {name!r}")
        step_lr = lr[name] if isinstance(lr, dict) else lr
        buf = state.momentum_buffers[name]
        buf *= state.momentum
        buf += g
        update = g + state.momentum * buf if state.nesterov else buf
        tensor.data = tensor.data - step_lr * update
    state.counter += 1
    if state.counter >= state.k:
        state.counter = 0
        for name, tensor in state.fast.items():
            slow = state.slow[name]
            if state.alpha == 1.0:
                slow[...] = tensor.data
            else:
                slow += state.alpha * (tensor.data - slow)
            tensor.data = slow.copy()
