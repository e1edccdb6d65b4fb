"""Segmentation metrics: confusion matrix, per-class IoU, mIoU, pixel accuracy.

Counts accumulate in int64 and merge by addition, so streaming per-image
accumulation equals batch evaluation exactly. Pixels whose ground-truth
label equals the ignore index never enter the counts.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """c x c integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int | None = IGNORE_INDEX):
        if num_classes < 1:
            raise ValidationError(f"need at least one class, got {num_classes}")
        if ignore_index is not None and 0 <= ignore_index < num_classes:
            raise ValidationError(
                f"ignore index {ignore_index} collides with class range 0..{num_classes - 1}"
            )
        self.num_classes = int(num_classes)
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = _labels(pred)
        gt = _labels(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        pred = pred.reshape(-1)
        gt = gt.reshape(-1)
        valid = np.ones(gt.shape, dtype=bool)
        if self.ignore_index is not None:
            valid = gt != self.ignore_index
        c = self.num_classes
        if valid.any():
            g = gt[valid]
            p = pred[valid]
            if (g < 0).any() or (g >= c).any():
                raise ValidationError(f"ground-truth label outside 0..{c - 1}")
            if (p < 0).any() or (p >= c).any():
                raise ValidationError(f"predicted label outside 0..{c - 1}")
            self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    def __add__(self, other):
        return self.merge(other)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _labels(m) -> np.ndarray:
    if hasattr(m, "labels"):
        m = m.labels
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.integer):
        raise ValidationError(f"label maps must be integer, got {m.dtype}")
    return m


def accumulate(pred, gt, num_classes: int, ignore_index: int | None = IGNORE_INDEX) -> ConfusionMatrix:
    return ConfusionMatrix(num_classes, ignore_index).add(pred, gt)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the union is zero (class absent on both sides)."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    out = np.full(cm.num_classes, np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def miou(cm: ConfusionMatrix) -> float | None:
    """Mean IoU over classes with nonzero union; None when no pixel was counted."""
    if cm.total == 0:
        return None
    ious = per_class_iou(cm)
    return float(np.nanmean(ious))


def pixel_accuracy(cm: ConfusionMatrix) -> float | None:
    if cm.total == 0:
        return None
    return float(np.diag(cm.counts).sum() / cm.total)


def _interior_boundaries(origins: list[int], window: int, limit: int) -> list[int]:
    edges = {o for o in origins if o > 0}
    edges |= {o + window for o in origins if 0 < o + window < limit}
    return sorted(edges)


def seam_disagreement_rate(labels, layout, band: int | None = None) -> float:
    """Fraction of mirrored pixel pairs that disagree across window seams.

    For every interior window edge, pixel (d - 1) before the edge is paired
    with pixel (d - 1) after it for d = 1..band (band defaults to the patch
    size). A label map free of stitching artifacts scores near 0; maps that
    flip classes at window boundaries score high. No seams (single window
    covering the image) yields 0.
    """
    labels = _labels(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be H x W, got {labels.shape}")
    h, w = labels.shape
    band = layout.patch if band is None else band
    disagree = 0
    total = 0
    xs = _interior_boundaries([x0 for _, x0 in layout.origins], layout.window, w)
    for xb in xs:
        for d in range(1, band + 1):
            left, right = xb - d, xb + d - 1
            if left < 0 or right >= w:
                continue
            disagree += int((labels[:, left] != labels[:, right]).sum())
            total += h
    ys = _interior_boundaries([y0 for y0, _ in layout.origins], layout.window, h)
    for yb in ys:
        for d in range(1, band + 1):
            top, bottom = yb - d, yb + d - 1
            if top < 0 or bottom >= h:
                continue
            disagree += int((labels[top, :] != labels[bottom, :]).sum())
            total += w
    return disagree / total if total else 0.0
