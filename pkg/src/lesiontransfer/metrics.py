"""Intersection-over-union from confusion counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class EvalReport:
    iou: list            # per class, NaN where the class is absent from both masks
    miou: float
    confusion: np.ndarray
    config_digest: str = ""
    seeds: list = field(default_factory=list)

    @property
    def iou_n(self) -> float:
        return self.iou[0]

    @property
    def iou_d(self) -> float:
        """IoU of the lesion class (class 1)."""
        return self.iou[1] if len(self.iou) > 1 else float("nan")


def confusion(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    idx = gt.reshape(-1).astype(np.int64) * K + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=K * K).reshape(K, K)


def iou_from_confusion(cm: np.ndarray) -> tuple[list, float]:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    ious = [float(tp[k] / union[k]) if union[k] > 0 else float("nan") for k in range(cm.shape[0])]
    valid = [x for x in ious if not np.isnan(x)]
    return ious, float(np.mean(valid)) if valid else float("nan")


def iou(pred: np.ndarray, gt: np.ndarray, K: int) -> EvalReport:
    """Per-class IoU and mIoU; classes absent from both masks are left out of the mean."""
    cm = confusion(pred, gt, K)
    ious, miou = iou_from_confusion(cm)
    return EvalReport(ious, miou, cm)
