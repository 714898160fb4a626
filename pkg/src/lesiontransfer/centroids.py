"""Per-class feature centroids with exponential memory and the semantic
consistence loss between the source and target banks."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, save_tensor

NORMALIZE = ("total", "per_class")
ABSENT = ("skip", "zero")


def unit_features(features: Tensor, eps: float = 1e-12) -> Tensor:
    """Scales every pixel feature vector to unit length (zero vectors stay
    near zero)."""
    sq = T.sum_(T.mul(features, features), axis=-1, keepdims=True)
    norm = T.sqrt(T.clamp_min(sq, eps))
    return T.div(features, T.broadcast_to(norm, features.shape))


def batch_centroids(features: Tensor, labels: np.ndarray, K: int,
                    normalize: str = "total") -> list[Tensor | None]:
    """Class feature sums over a batch divided by the total pixel count.

    ``labels`` lives on the feature grid; negative ids are ignored but still
    count towards the total divisor. ``normalize="per_class"`` divides by
    the class pixel count instead.
    """
    if normalize not in NORMALIZE:
        raise ValueError(f"normalize must be one of {NORMALIZE}")
    labels = np.asarray(labels)
    if labels.shape != features.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match feature grid {features.shape[:-1]}")
    D = features.shape[-1]
    flat = labels.reshape(-1)
    onehot = (flat[None, :] == np.arange(K)[:, None]).astype(features.dtype)
    counts = onehot.sum(axis=1)
    sums = T.matmul(Tensor(onehot), T.reshape(features, (-1, D)))
    out: list[Tensor | None] = []
    for k in range(K):
        if counts[k] == 0:
            out.append(None)
            continue
        div = flat.size if normalize == "total" else counts[k]
        out.append(T.mul(T.index(sums, k), 1.0 / float(div)))
    return out


class CentroidBank:
    """Running ``C_k = sum_x gamma^(t-x) C_k^x``; absent classes only decay."""

    def __init__(self, K: int, D: int, gamma: float = 0.7, dtype=np.float64):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        self.K, self.D, self.gamma = K, D, float(gamma)
        self.C = np.zeros((K, D), dtype=dtype)
        self.present = np.zeros(K, dtype=bool)
        self.t = 0

    def candidate(self, new: Sequence[Tensor | None]) -> list[Tensor | None]:
        """Next-step centroids; history enters as a constant, so gradients
        flow only into the current batch term."""
        out: list[Tensor | None] = []
        for k in range(self.K):
            old = Tensor(self.gamma * self.C[k])
            if new[k] is not None:
                out.append(T.add(old, new[k]))
            elif self.present[k]:
                out.append(old)
            else:
                out.append(None)
        return out

    def commit(self, cand: Sequence[Tensor | None]) -> None:
        for k in range(self.K):
            if cand[k] is None:
                self.C[k] = self.gamma * self.C[k]
            else:
                self.C[k] = cand[k].data
                self.present[k] = True
        self.t += 1

    def update(self, new: Sequence) -> "CentroidBank":
        wrapped = [None if c is None else (c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=float)))
                   for c in new]
        self.commit(self.candidate(wrapped))
        return self

    def as_list(self) -> list[Tensor | None]:
        return [Tensor(self.C[k].copy()) if self.present[k] else None for k in range(self.K)]

    def save(self, path) -> None:
        save_tensor(path, self.C)


def consistence_loss(source: Sequence[Tensor | None], target: Sequence[Tensor | None],
                     alpha: float = 1.0, absent: str = "skip") -> Tensor:
    """Sum over classes of ||Cs - Ct||^2 + alpha * ||Cs - Ct||_1."""
    if absent not in ABSENT:
        raise ValueError(f"absent must be one of {ABSENT}")
    if len(source) != len(target):
        raise ShapeError("banks disagree on the class count")
    total = None
    for cs, ct in zip(source, target):
        if cs is None and ct is None:
            continue
        if cs is None or ct is None:
            if absent == "skip":
                continue
            ref = cs if cs is not None else ct
            zero = Tensor(np.zeros(ref.shape, ref.dtype))
            cs, ct = (cs if cs is not None else zero), (ct if ct is not None else zero)
        d = T.sub(cs, ct)
        term = T.add(T.sum_(T.mul(d, d)), T.mul(T.sum_(T.abs_(d)), float(alpha)))
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(np.zeros(()))


def append_norms_csv(path, epoch: int, banks: dict[str, CentroidBank], header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["epoch", "domain", "class", "norm", "present"])
        for domain, bank in banks.items():
            for k in range(bank.K):
                w.writerow([epoch, domain, k, repr(float(np.linalg.norm(bank.C[k]))), int(bank.present[k])])
