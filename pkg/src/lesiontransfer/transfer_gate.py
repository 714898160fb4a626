"""Transferability from critic confidence, used as a residual feature gate.

W = 1 - H2(score) where H2 is the binary entropy in bits, so W lies in
[0, 1]: zero when the critic cannot tell the domains apart, one when it is
certain. Features are then scaled by (1 + W), which never shrinks them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

_LN2 = float(np.log(2.0))
_FLOOR = 1e-12
GRANULARITY = ("map", "image")


def entropy_bits(p) -> np.ndarray:
    """Plain-array binary entropy with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("probability outside [0, 1]")
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(q > 0, q * np.log2(q), 0.0))
    return h


def bernoulli_entropy(p: Tensor) -> Tensor:
    """Differentiable binary entropy in bits; exact 0 at p in {0, 1}."""
    if np.any((p.data < 0) | (p.data > 1)):
        raise ValueError("probability outside [0, 1]")
    q = T.sub(1.0, p)
    terms = T.add(T.mul(p, T.log(T.clamp_min(p, _FLOOR))), T.mul(q, T.log(T.clamp_min(q, _FLOOR))))
    return T.mul(terms, -1.0 / _LN2)


def quantify(scores: Tensor, size: tuple[int, int] | None = None, granularity: str = "map") -> Tensor:
    """Transferability map from ``N x h x w x 1`` critic scores, resized to ``size``."""
    if granularity not in GRANULARITY:
        raise ValueError(f"granularity must be one of {GRANULARITY}")
    if granularity == "image":
        scores = T.mean(scores, axis=(-3, -2), keepdims=True)
    w = T.sub(1.0, bernoulli_entropy(scores))
    if size is not None:
        w = T.resize(w, size, "bilinear")
    return w


def apply_gate(fo: Tensor, w: Tensor) -> Tensor:
    """F_w = (1 + W) * F_o with W shared across channels."""
    if fo.shape[:-1] != w.shape[:-1] or w.shape[-1] != 1:
        raise ShapeError(f"gate extent {w.shape} does not match features {fo.shape}")
    return T.mul(T.broadcast_to(T.add(w, 1.0), fo.shape), fo)


def gate(fo: Tensor, scores: Tensor, granularity: str = "map", detach: bool = True) -> tuple[Tensor, Tensor]:
    """Quantify and apply in one go; returns ``(F_w, W)``."""
    if detach:
        scores = T.detach(scores)
    w = quantify(scores, (fo.shape[-3], fo.shape[-2]), granularity)
    return apply_gate(fo, w), w
