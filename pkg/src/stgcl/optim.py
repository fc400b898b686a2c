"""Adam with global-L2-norm gradient clipping."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale every gradient by ``min(1, max_norm / ||g||)``; return (grads, norm)."""
    if max_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


class Adam:
    """Adam over a named parameter dict.

    ``lr_overrides`` maps parameter names to their own learning rate, which is
    how fine-tuning gives the encoder and decoder different step sizes while
    sharing one clipping norm. No weight decay.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None,
                 lr_overrides: dict[str, float] | None = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive when clipping is enabled, got {clip_norm}")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.lr_overrides = dict(lr_overrides or {})
        for name, value in self.lr_overrides.items():
            if value <= 0:
                raise ValueError(f"learning rate for {name} must be positive, got {value}")
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clipping global grad norm."""
        grads = {k: grads[k] for k in self.params if k in grads}
        if self.clip_norm is not None:
            grads, norm = clip_by_global_norm(grads, self.clip_norm)
        else:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            lr = self.lr_overrides.get(name, self.lr)
            p = self.params[name]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam | None = None,
              **kwargs) -> Adam:
    """Functional entry point: one Adam step, creating optimizer state if needed."""
    opt = state if state is not None else Adam(params, **kwargs)
    opt.step(grads)
    return opt
