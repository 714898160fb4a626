"""Training losses: image classification, source/target segmentation with
pseudo labels, and the Wasserstein critic objective with gradient penalty."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-12
GP_MODES = ("aswritten", "interpolated")


def _as_onehot(y, K: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim >= 1 and y.shape[-1] == K and np.issubdtype(y.dtype, np.floating):
        return y
    return (y[..., None] == np.arange(K)).astype(np.float64)


def cross_entropy(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Per-row ``-y^T log p`` (probabilities floored at 1e-12)."""
    oh = Tensor(np.asarray(onehot, dtype=probs.dtype))
    if oh.shape != probs.shape:
        raise ShapeError(f"labels {oh.shape} vs probs {probs.shape}")
    return T.neg(T.sum_(T.mul(oh, T.log(T.clamp_min(probs, PROB_FLOOR))), axis=-1))


def classification_loss(probs_s: Tensor, y_s, probs_t: Tensor | None = None, y_t=None) -> Tensor:
    """Source batch mean plus (when given) target batch mean of the image CE."""
    K = probs_s.shape[-1]
    loss = T.mean(cross_entropy(probs_s, _as_onehot(y_s, K)))
    if probs_t is not None:
        loss = T.add(loss, T.mean(cross_entropy(probs_t, _as_onehot(y_t, K))))
    return loss


def source_segmentation_loss(prob_s: Tensor, y_ss: np.ndarray) -> Tensor:
    return T.mean(cross_entropy(prob_s, _as_onehot(y_ss, prob_s.shape[-1])))


def target_segmentation_loss(prob_t: Tensor, yhat: np.ndarray, v: np.ndarray, lam: np.ndarray,
                             weighted: bool = True) -> Tensor:
    """Mean over pixels of ``p_b v_b (-log S2(x)_yhat) - lambda_yhat v_b``.

    ``p_b`` (the max class probability) and ``v`` are constants here.
    """
    K = prob_t.shape[-1]
    oh = _as_onehot(yhat, K)
    ce = cross_entropy(prob_t, oh)
    vv = np.asarray(v, dtype=prob_t.dtype)
    weight = vv * (prob_t.data.max(axis=-1) if weighted else 1.0)
    penalty = float(np.sum(np.asarray(lam)[np.asarray(yhat)] * vv)) / vv.size
    return T.sub(T.mean(T.mul(Tensor(weight.astype(prob_t.dtype)), ce)), penalty)


def segmentation_loss(prob_s: Tensor, y_ss, prob_t: Tensor | None = None, pseudo=None,
                      lam=None, weighted: bool = True) -> Tensor:
    loss = source_segmentation_loss(prob_s, y_ss)
    if prob_t is not None and pseudo is not None:
        yhat, v = pseudo
        loss = T.add(loss, target_segmentation_loss(prob_t, yhat, v, lam, weighted))
    return loss


def target_term_value(mx: np.ndarray, v: np.ndarray, lam_y: np.ndarray) -> float:
    """Plain-array value of the target term for fixed probabilities."""
    return float(np.mean(mx * v * -np.log(mx) - lam_y * v))


# ---------------------------------------------------------------------------
# Wasserstein critic
# ---------------------------------------------------------------------------

def sample_scores(critic: Callable[[Tensor], Tensor], feats: Tensor) -> Tensor:
    """One score per sample: the spatial mean of the critic map."""
    m = critic(feats)
    return T.reshape(T.mean(m, axis=tuple(range(1, m.ndim))), (m.shape[0],))


def gradient_norms(critic: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """Per-sample norm of d score / d input, kept on the graph."""
    xi = Tensor(x.data, requires_grad=True) if not x.requires_grad else x
    (g,) = T.grad(T.sum_(sample_scores(critic, xi)), [xi], create_graph=True)
    sq = T.sum_(T.mul(g, g), axis=tuple(range(1, g.ndim)))
    return T.sqrt(T.clamp_min(sq, PROB_FLOOR * PROB_FLOOR))


def gradient_penalty(critic, feats_s: Tensor, feats_t: Tensor, mode: str = "aswritten",
                     rng: np.random.Generator | None = None) -> Tensor:
    if mode not in GP_MODES:
        raise ValueError(f"gp mode must be one of {GP_MODES}")
    if mode == "aswritten":
        terms = []
        for f in (feats_s, feats_t):
            d = T.sub(gradient_norms(critic, T.detach(f)), 1.0)
            terms.append(T.mean(T.mul(d, d)))
        return T.add(terms[0], terms[1])
    n = min(feats_s.shape[0], feats_t.shape[0])
    eps = (rng or np.random.default_rng(0)).random(n).astype(feats_s.dtype).reshape((n,) + (1,) * (feats_s.ndim - 1))
    mix = eps * feats_s.data[:n] + (1.0 - eps) * feats_t.data[:n]
    d = T.sub(gradient_norms(critic, Tensor(mix)), 1.0)
    return T.mean(T.mul(d, d))


def wasserstein_gap(critic, feats_s: Tensor, feats_t: Tensor) -> Tensor:
    return T.sub(T.mean(sample_scores(critic, feats_s)), T.mean(sample_scores(critic, feats_t)))


def wasserstein_critic_objective(critic, feats_s: Tensor, feats_t: Tensor, xi: float = 10.0,
                                 mode: str = "aswritten", rng=None) -> tuple[Tensor, Tensor, Tensor]:
    """Objective the critic maximises: score gap minus ``xi`` times the
    penalty. Returns ``(objective, gap, penalty)``."""
    gap = wasserstein_gap(critic, T.detach(feats_s), T.detach(feats_t))
    if xi == 0:
        pen = Tensor(np.zeros((), feats_s.dtype))
        return gap, gap, pen
    pen = gradient_penalty(critic, feats_s, feats_t, mode, rng)
    return T.sub(gap, T.mul(pen, float(xi))), gap, pen
