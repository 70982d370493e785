"""Adam with global-norm gradient clipping.

State is kept per parameter, including the step counter, so a parameter that
sits out a step (no gradient) is left bitwise untouched and its bias
correction only advances when it actually trains.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


def global_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 1.0):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self._state: dict[int, tuple[int, np.ndarray, np.ndarray]] = {}

    def step(self, params: Iterable[Tensor]) -> float:
        """Update every parameter that has a gradient; returns the pre-clip norm."""
        params = [p for p in params if p.requires_grad and p.grad is not None]
        norm = global_norm(params)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        for p in params:
            g = p.grad * scale
            t, m, v = self._state.get(id(p), (0, np.zeros_like(p.data), np.zeros_like(p.data)))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            # rebinding keeps previously returned arrays (checksums, snapshots) intact
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None
            self._state[id(p)] = (t, m, v)
        return norm
