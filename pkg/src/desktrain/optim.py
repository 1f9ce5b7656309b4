"""AdamW with decoupled weight decay, warmup + cosine decay, gradient clipping.

All optimizer arithmetic runs in float64 regardless of the training numeric
mode; the trainer decides whether updated parameters are rounded back to the
bfloat16 grid afterwards. Optimizer moments are never rounded: keeping the
second moment full-width is what makes small-beta2 configurations behave as
analyzed, and the memory cost is irrelevant at this scale.

Everything here is functional: steps return fresh parameter and state dicts
so callers can snapshot by reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Tensors = dict[str, np.ndarray]


@dataclass(frozen=True)
class OptimConfig:
    total_steps: int
    warmup_steps: int
    lr_max: float = 3.0e-4
    lr_min: float = 3.0e-5
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    adam_eps: float = 1.0e-8
    #: Apply weight decay to norm gains too (decay on every parameter).
    decay_norm_weights: bool = True

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must satisfy 0 <= warmup < total_steps")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("weight_decay >= 0, clip_norm > 0, adam_eps > 0 required")


@dataclass
class OptimState:
    """First/second moment estimates and the shared step counter."""

    m: Tensors
    v: Tensors
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Tensors) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def lr_at(step: int, config: OptimConfig) -> float:
    """Learning rate at an integer step.

    Linear from 0 to lr_max over `warmup_steps`, then cosine from lr_max
    down to lr_min at `total_steps`; clamped to lr_min beyond that. The two
    pieces agree at the warmup boundary and the endpoints are hit exactly.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    cfg = config
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_max
        return cfg.lr_max * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.lr_min
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: Tensors) -> float:
    """Global L2 norm over all gradient tensors, accumulated in float64."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(grads: Tensors, clip_norm: float) -> tuple[Tensors, float]:
    """Scale all gradients by clip_norm / norm when the global norm exceeds
    clip_norm; otherwise return them untouched.

    Returns (possibly rescaled gradients, pre-clip global norm). The
    trigger carries a hair of slack so that re-clipping an already clipped
    set is an exact no-op even after float rounding.
    """
    norm = global_grad_norm(grads)
    if norm > clip_norm * (1.0 + 1e-12):
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def adamw_step(
    params: Tensors,
    grads: Tensors,
    state: OptimState,
    config: OptimConfig,
    lr: float,
    skip_decay: frozenset[str] | set[str] = frozenset(),
) -> tuple[Tensors, OptimState]:
    """One AdamW update. Returns new params and new state; inputs unchanged.

    Decoupled decay: w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w).
    Tensors named in `skip_decay` get no weight decay (used when
    decay_norm_weights is off).
    """
    if set(params) != set(grads):
        raise KeyError("params and grads must have identical tensor names")
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: Tensors = {}
    new_m: Tensors = {}
    new_v: Tensors = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if config.weight_decay and name not in skip_decay:
            update = update + config.weight_decay * p
        new_params[name] = p - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimState(m=new_m, v=new_v, t=t)
