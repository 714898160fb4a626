"""Spatial (SAN) and channel (CAN) self-attention with zero-initialised
residual scales, fused by element-wise sum.

Feature maps are ``H x W x C`` or batched ``N x H x W x C``. Attention
matrices are normalised over their first index by default, so each column
sums to one; ``normalize_axis="second"`` gives the usual row-normalised form.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

AXES = ("first", "second")


def _softmax_axis(normalize_axis: str) -> int:
    if normalize_axis not in AXES:
        raise ValueError(f"normalize_axis must be one of {AXES}, got {normalize_axis!r}")
    return -2 if normalize_axis == "first" else -1


def init_params(C: int, rng: np.random.Generator, dtype=np.float64, prefix: str = "att") -> dict[str, Tensor]:
    std = np.sqrt(1.0 / C)
    p = {}
    for name in ("q", "k", "v"):
        p[f"{prefix}.{name}"] = Tensor(rng.normal(0.0, std, (1, 1, C, C)).astype(dtype), requires_grad=True)
    p[f"{prefix}.delta"] = Tensor(np.zeros((), dtype), requires_grad=True)
    p[f"{prefix}.tau"] = Tensor(np.zeros((), dtype), requires_grad=True)
    return p


def _flatten(fm: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    if fm.ndim not in (3, 4):
        raise ShapeError(f"feature map must be rank 3 or 4, got {fm.shape}")
    lead = fm.shape[:-3]
    H, W, C = fm.shape[-3:]
    return T.reshape(fm, lead + (H * W, C)), fm.shape


def _project(x: Tensor, kernel: Tensor) -> Tensor:
    # a 1x1 convolution is a matmul over the channel axis
    return T.matmul(x, T.reshape(kernel, kernel.shape[2:]))


def spatial_matrix(fm: Tensor, p: dict[str, Tensor], normalize_axis: str = "first",
                   prefix: str = "att") -> Tensor:
    x, _ = _flatten(fm)
    c1 = _project(x, p[f"{prefix}.q"])
    c2 = _project(x, p[f"{prefix}.k"])
    return T.softmax(T.matmul(c1, T.swap_last(c2)), axis=_softmax_axis(normalize_axis))


def channel_matrix(fm: Tensor, normalize_axis: str = "first") -> Tensor:
    x, _ = _flatten(fm)
    return T.softmax(T.matmul(T.swap_last(x), x), axis=_softmax_axis(normalize_axis))


def spatial_attention(fm: Tensor, p: dict[str, Tensor], normalize_axis: str = "first",
                      prefix: str = "att") -> Tensor:
    """F_p[i] = delta * sum_j M[i, j] C3[j] + F_m[i] over flattened positions."""
    x, shape = _flatten(fm)
    m = spatial_matrix(fm, p, normalize_axis, prefix)
    c3 = _project(x, p[f"{prefix}.v"])
    return T.add(T.mul(p[f"{prefix}.delta"], T.reshape(T.matmul(m, c3), shape)), fm)


def channel_attention(fm: Tensor, p: dict[str, Tensor], normalize_axis: str = "first",
                      prefix: str = "att") -> Tensor:
    """F_c[:, i] = tau * sum_j G[i, j] X[:, j] + F_m[:, i] over channels."""
    x, shape = _flatten(fm)
    g = channel_matrix(fm, normalize_axis)
    mixed = T.matmul(x, T.swap_last(g))
    return T.add(T.mul(p[f"{prefix}.tau"], T.reshape(mixed, shape)), fm)


def fuse(fp: Tensor, fc: Tensor) -> Tensor:
    if fp.shape != fc.shape:
        raise ShapeError(f"fuse: shapes differ {fp.shape} vs {fc.shape}")
    return T.add(fp, fc)


def attend(fm: Tensor, p: dict[str, Tensor], normalize_axis: str = "first",
           prefix: str = "att") -> Tensor:
    return fuse(spatial_attention(fm, p, normalize_axis, prefix),
                channel_attention(fm, p, normalize_axis, prefix))
