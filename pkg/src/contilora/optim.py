"""Adam over named numpy arrays, updated in place."""

from __future__ import annotations

from typing import Hashable, Mapping

import numpy as np

from .errors import DimensionError


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[Hashable, np.ndarray] = {}
        self.v: dict[Hashable, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[Hashable, np.ndarray], grads: Mapping[Hashable, np.ndarray]) -> None:
        """One bias-corrected update of every array in ``params`` that has a gradient."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"{key}: gradient {g.shape} vs parameter {p.shape}")
            if not p.flags.writeable:
                raise ValueError(f"{key} is frozen")
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
