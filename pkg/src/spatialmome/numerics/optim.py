"""AdamW, warmup+cosine schedule and layer-wise learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer_decay_lambda: float = 0.7
    warmup_epochs: float = 40
    total_epochs: float = 1000
    batch_size: int = 1024

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not (0 < self.layer_decay_lambda <= 1):
            raise ValueError("layer_decay_lambda must lie in (0, 1]")
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ValueError("warmup_epochs must be smaller than total_epochs")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(config: OptimizerConfig, epoch: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_epochs``."""
    if not (0 <= epoch <= config.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs}]")
    w, total = config.warmup_epochs, config.total_epochs
    if epoch < w:
        return config.base_lr * epoch / w
    progress = (epoch - w) / (total - w)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_scale(group_depth: int, total_depth: int, lam: float) -> float:
    if not (0 < lam <= 1):
        raise ValueError("lambda must lie in (0, 1]")
    if not (0 <= group_depth <= total_depth):
        raise ValueError(f"group depth {group_depth} outside [0, {total_depth}]")
    return lam ** (total_depth - group_depth)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: OptimizerConfig,
    lr_now: float,
    lr_scale: Mapping[str, float] | None = None,
) -> OptimizerState:
    """One in-place AdamW update over named parameters.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if lr_now < 0:
        raise ValueError("lr_now must be non-negative")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lr_now * (lr_scale[name] if lr_scale is not None else 1.0)
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state
