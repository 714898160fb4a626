"""SVG figures: loss curves from a training log and ablation mIoU bars."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_C", "L_S", "L_W", "L_T", "total")


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def loss_curves(rows, path: str, window: int = 25, keys=LOSS_KEYS) -> None:
    """``rows`` are log dicts (or csv.DictReader rows) carrying ``step``."""
    steps = np.array([float(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for k in keys:
        y = np.array([float(r[k]) for r in rows])
        if not np.any(y):
            continue
        ys = _smooth(y, window)
        ax.plot(steps[len(steps) - len(ys):], ys, label=k, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def ablation_bars(table, path: str, metric: str = "mIoU") -> None:
    """``table`` rows as read back from the ablation CSV."""
    names = [r["variant"] for r in table]
    vals = [float(r[metric]) for r in table]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(names) + 1.5), 4.0))
    ax.bar(range(len(names)), vals, color="#4c72b0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(f"target {metric} (%)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
