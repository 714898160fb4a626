"""Class-balanced pseudo pixel labels for the unlabelled target domain.

One self-training round works in two passes over the target set: pool the
probability-weighted self cross-entropy of every pixel per predicted class,
pick a per-class threshold at the curriculum portion, then select pixels
under their class threshold (optionally filled in by superpixel voting).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .superpixel import SuperpixelMap, refine_weights

PORTION_START_PCT = 25
PORTION_STEP_PCT = 5
PORTION_MAX_PCT = 55


@dataclass
class PixelStats:
    Y: np.ndarray   # argmax class
    Mx: np.ndarray  # max probability
    L: np.ndarray   # -log Mx
    ML: np.ndarray  # Mx * L


@dataclass
class PseudoLabels:
    yhat: np.ndarray  # (H, W) int64 class ids
    v: np.ndarray     # (H, W) uint8 selection weights

    def masked(self, ignore: int = -1) -> np.ndarray:
        """Class ids where selected, ``ignore`` elsewhere."""
        return np.where(self.v == 1, self.yhat, ignore)


@dataclass
class ClassThresholds:
    lam: np.ndarray
    portion: float
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def K(self) -> int:
        return int(self.lam.size)


def curriculum_portion(epoch: int) -> float:
    pct = min(PORTION_START_PCT + PORTION_STEP_PCT * int(epoch), PORTION_MAX_PCT)
    return pct / 100.0


def pixel_stats(prob: np.ndarray) -> PixelStats:
    prob = np.asarray(prob, dtype=np.float64)
    Y = np.argmax(prob, axis=-1).astype(np.int64)
    Mx = np.minimum(np.max(prob, axis=-1), 1.0)
    L = -np.log(Mx)
    return PixelStats(Y, Mx, L, Mx * L)


def threshold_index(n: float, length: int) -> int:
    # guard against 0.3*10 = 2.9999... style rounding
    return min(int(math.floor(n * length + 1e-9)), length - 1)


def determine_thresholds(pooled: Sequence[np.ndarray], n: float) -> ClassThresholds:
    """``pooled[k]`` holds every target pixel loss predicted as class ``k``."""
    if not 0.0 < n < 1.0:
        raise ValueError(f"portion must lie in (0, 1), got {n}")
    lam = np.zeros(len(pooled))
    counts = np.zeros(len(pooled), dtype=np.int64)
    for k, values in enumerate(pooled):
        values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1), kind="stable")
        counts[k] = values.size
        if values.size:
            lam[k] = values[threshold_index(n, values.size)]
    return ClassThresholds(lam, n, counts)


def pool_losses(stats: Sequence[PixelStats], K: int, weighted: bool = True,
                class_balanced: bool = True) -> list[np.ndarray]:
    losses = [s.ML if weighted else s.L for s in stats]
    if not class_balanced:
        everything = np.concatenate([l.reshape(-1) for l in losses]) if losses else np.zeros(0)
        return [everything] * K
    pooled = []
    for k in range(K):
        parts = [l[s.Y == k] for s, l in zip(stats, losses)]
        pooled.append(np.concatenate(parts) if parts else np.zeros(0))
    return pooled


def select_weights(prob: np.ndarray, th: ClassThresholds, weighted: bool = True) -> PseudoLabels:
    """Closed-form selection: keep a pixel iff its weighted loss is strictly
    below its class threshold (the log-probability form rearranged)."""
    s = pixel_stats(prob)
    loss = s.ML if weighted else s.L
    v = (loss < th.lam[s.Y]).astype(np.uint8)
    return PseudoLabels(s.Y, v)


def generate(prob_maps: Sequence[np.ndarray], n: float, K: int,
             superpixels: Sequence | None = None, class_balanced: bool = True,
             weighted: bool = True, inplace: bool = False,
             backend: str | None = None) -> tuple[list[PseudoLabels], ClassThresholds, list[np.ndarray]]:
    """Full pseudo-labelling round over a target set.

    Returns the final labels, the thresholds, and the selection masks before
    superpixel refinement (kept for diagnostics and ablation diffs).
    """
    stats = [pixel_stats(p) for p in prob_maps]
    th = determine_thresholds(pool_losses(stats, K, weighted, class_balanced), n)
    out, initial = [], []
    for i, (p, s) in enumerate(zip(prob_maps, stats)):
        loss = s.ML if weighted else s.L
        v = (loss < th.lam[s.Y]).astype(np.uint8)
        initial.append(v)
        if superpixels is not None:
            v = refine_weights(v, s.Y, superpixels[i], K, inplace=inplace, backend=backend)
        out.append(PseudoLabels(s.Y, v))
    return out, th, initial


def selected_counts(labels: Sequence[PseudoLabels], K: int) -> np.ndarray:
    sel = np.zeros(K, dtype=np.int64)
    for pl in labels:
        sel += np.bincount(pl.yhat[pl.v == 1].reshape(-1), minlength=K)[:K]
    return sel


def write_threshold_report(path, th: ClassThresholds, labels: Sequence[PseudoLabels]) -> None:
    sel = selected_counts(labels, th.K)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "lambda", "count", "selected"])
        for k in range(th.K):
            w.writerow([k, repr(float(th.lam[k])), int(th.counts[k]), int(sel[k])])


def superpixels_for(images: Sequence[np.ndarray], k_sp: int, compactness: float, iters: int,
                    backend: str | None = None) -> list[SuperpixelMap]:
    from .superpixel import slic
    return [slic(img, k_sp, compactness, iters, backend=backend) for img in images]
