"""Adamax and the warmup / linear-decay learning-rate curve."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def lr_schedule(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Linear 0 -> peak over the first ceil(0.1 * total) steps, then linear peak -> 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step <= warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class AdamaxState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamaxState,
    lr: float | None = None,
) -> None:
    """One in-place Adamax update of every array in ``params``.

    ``lr`` overrides ``state.lr`` for this step (the scheduler passes it in).
    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    rate = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    correction = 1.0 - b1**t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.u[name] = np.zeros_like(theta)
        u = state.u[name]
        m *= b1
        m += (1.0 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        # bias-correct m before scaling so the first step with eps=0 moves exactly lr
        theta -= (rate * (m / correction) / (u + state.eps)).astype(theta.dtype, copy=False)
