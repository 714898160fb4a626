"""Adam with a step-decay learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def step_decay_lr(lr0: float, step: int, rate: float = 0.7, every: int = 950) -> float:
    """Learning rate in effect for optimiser step ``step`` (0-based)."""
    return lr0 * rate ** (step // every)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    f = max_norm / norm
    return [g * np.asarray(f, dtype=g.dtype) for g in grads], norm


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 decay_rate: float = 0.7, decay_every: int = 950, clip_norm: float | None = 5.0):
        self.params = params
        self.names = sorted(params)
        self.lr0 = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay_rate, self.decay_every = decay_rate, decay_every
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0
        self.last_norm = 0.0

    @property
    def lr(self) -> float:
        return step_decay_lr(self.lr0, self.t, self.decay_rate, self.decay_every)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; missing grads count as zero. Returns the lr used."""
        lr = self.lr
        names = self.names
        raw = [np.asarray(grads[k], dtype=self.params[k].dtype) if grads.get(k) is not None
               else np.zeros_like(self.params[k].data) for k in names]
        clipped, self.last_norm = clip_by_global_norm(raw, self.clip_norm)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in zip(names, clipped):
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            upd = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p = self.params[k]
            p.data = (p.data - upd).astype(p.dtype)
        return lr

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": self.m[k] for k in self.names}
        out.update({f"v.{k}": self.v[k] for k in self.names})
        out["t"] = np.array(self.t, dtype=np.float64)
        return out
