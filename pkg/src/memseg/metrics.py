from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class IoUReport:
    per_class_iou: list          # float, or None when the class never appears in pred or gt
    miou: float
    confusion: np.ndarray        # (C, C), rows = ground truth, cols = prediction

    def to_dict(self) -> dict:
        return {"miou": self.miou, "per_class_iou": self.per_class_iou, "confusion": self.confusion.tolist()}


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int | None = 255) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = np.ones_like(gt, dtype=bool) if ignore is None else gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ValueError(f"labels outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int | None = 255) -> IoUReport:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    conf = confusion_matrix(pred, gt, num_classes, ignore)
    return report_from_confusion(conf)


def report_from_confusion(conf: np.ndarray) -> IoUReport:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    per = [float(t / u) if u > 0 else None for t, u in zip(tp, union)]
    defined = [v for v in per if v is not None]
    return IoUReport(per, float(np.mean(defined)) if defined else 0.0, conf)
