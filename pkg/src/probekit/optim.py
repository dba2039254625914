"""Minimal optimizers that update a ParamStore in place from a GradMap."""
from __future__ import annotations

import numpy as np

from probekit.tensor import ParamStore


class SGD:
    def __init__(self, params: ParamStore, lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        for name, g in grads.items():
            if name in self.params.frozen_names:
                continue
            p = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = (p.data - (self.lr * lr_scale) * v).astype(p.data.dtype)


class Adam:
    """Adam; with ``decoupled=True`` the weight decay is AdamW-style."""

    def __init__(
        self,
        params: ParamStore,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = True,
    ):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            if name in self.params.frozen_names:
                continue
            p = self.params[name]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay and self.decoupled:
                new = new - lr * self.weight_decay * p.data
            p.data = new.astype(p.data.dtype)


def AdamW(params: ParamStore, lr: float = 1e-3, weight_decay: float = 1e-4, **kw) -> Adam:
    return Adam(params, lr=lr, weight_decay=weight_decay, decoupled=True, **kw)
