"""Segmentation quality metrics.

Mean IoU follows the usual convention: per-class intersection over union,
averaged over the classes that actually occur (classes absent from both the
ground truth and the prediction contribute no term rather than a zero).
Boundary metrics treat label 0 as "boundary" to match the ground-truth
annotation convention used elsewhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts[i, j] = points with true class i predicted as class j."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @classmethod
    def from_labels(cls, true, pred, num_classes: int) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if true.shape != pred.shape:
            raise ValueError("label arrays must have matching length")
        for name, arr in (("true", true), ("pred", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise ValueError(f"{name} labels outside [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class appears in neither truth nor prediction."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = tp[present] / denom[present]
    return out


def miou(cm: ConfusionMatrix) -> float:
    ious = per_class_iou(cm)
    valid = ~np.isnan(ious)
    if not valid.any():
        raise ValueError("mean IoU undefined: no class occurs in truth or prediction")
    return float(ious[valid].mean())


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total == 0:
        raise ValueError("accuracy undefined for empty confusion matrix")
    return float(np.diag(cm.counts).sum() / total)


def boundary_scores(true_g, pred_g) -> tuple[float, float, float]:
    """Precision, recall, F1 of the boundary class (value 0).

    Scores are 0 when their denominator is 0, so a predictor that never
    flags a boundary gets recall 0 rather than an error.
    """
    true_b = np.asarray(true_g).ravel() == 0
    pred_b = np.asarray(pred_g).ravel() == 0
    if true_b.shape != pred_b.shape:
        raise ValueError("boundary arrays must have matching length")
    tp = float(np.count_nonzero(true_b & pred_b))
    fp = float(np.count_nonzero(~true_b & pred_b))
    fn = float(np.count_nonzero(true_b & ~pred_b))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def boundary_band_accuracy(true_labels, pred_labels, boundary_gt) -> float:
    """Label accuracy restricted to ground-truth boundary points (g = 0)."""
    true_labels = np.asarray(true_labels).ravel()
    pred_labels = np.asarray(pred_labels).ravel()
    band = np.asarray(boundary_gt).ravel() == 0
    if not (true_labels.shape == pred_labels.shape == band.shape):
        raise ValueError("arrays must have matching length")
    if not band.any():
        raise ValueError("boundary band accuracy undefined: no boundary points")
    return float(np.mean(true_labels[band] == pred_labels[band]))
