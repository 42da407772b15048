"""Masked confusion matrices and the occupancy / semantic IoU family."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [N, N] int64, rows = ground truth, cols = prediction
    masked_out: int = 0

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum()) + int(self.masked_out)

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.counts + other.counts, self.masked_out + other.masked_out)


def confusion_matrix(pred, gt, mask=None, num_classes=None):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask shape {mask.shape} != ground truth shape {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    p = pred[mask].astype(np.int64)
    g = gt[mask].astype(np.int64)
    if p.size and (p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64), int(mask.size - mask.sum()))


def occupancy_iou_recall(cm):
    """IoU and recall of the occupied class (index 1) of a 2-class matrix; None when undefined."""
    if cm.num_classes != 2:
        raise ValueError("occupancy metrics need a 2-class confusion matrix")
    tp = cm.counts[1, 1]
    fp = cm.counts[0, 1]
    fn = cm.counts[1, 0]
    iou = tp / (tp + fp + fn) if tp + fp + fn else None
    recall = tp / (tp + fn) if tp + fn else None
    return (None if iou is None else float(iou)), (None if recall is None else float(recall))


def collapse_to_occupancy(cm, free_class=0):
    """Merge every non-free class into 'occupied'."""
    c = cm.counts
    keep = [i for i in range(cm.num_classes) if i != free_class]
    out = np.zeros((2, 2), dtype=np.int64)
    out[0, 0] = c[free_class, free_class]
    out[0, 1] = c[free_class, keep].sum()
    out[1, 0] = c[keep, free_class].sum()
    out[1, 1] = c[np.ix_(keep, keep)].sum()
    return ConfusionMatrix(out, cm.masked_out)


def semantic_miou(cm, free_class=0, zero_absent=False):
    """Per-class IoU for every class except the free one, and their mean.

    Classes with an empty union have IoU ``None`` and are left out of the mean
    unless ``zero_absent`` counts them as 0.
    """
    if cm.num_classes < 2:
        raise ValueError("mIoU needs at least 2 classes")
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    ious = {}
    for k in range(cm.num_classes):
        if k == free_class:
            continue
        denom = tp[k] + fp[k] + fn[k]
        ious[k] = float(tp[k] / denom) if denom else (0.0 if zero_absent else None)
    defined = [v for v in ious.values() if v is not None]
    miou = float(np.mean(defined)) if defined else None
    return ious, miou


def format_report(cm, class_names=None, occupancy=None, zero_absent=False):
    """Text table of per-class IoU followed by IoU / mIoU / Recall lines."""
    ious, miou = semantic_miou(cm, zero_absent=zero_absent)
    iou, recall = occupancy_iou_recall(occupancy or collapse_to_occupancy(cm))
    names = class_names or [f"class{k}" for k in range(cm.num_classes)]
    fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}"
    lines = [f"{'class':<14}IoU"]
    for k, v in ious.items():
        lines.append(f"{names[k]:<14}{fmt(v)}")
    lines.append(f"IoU={fmt(iou)}")
    lines.append(f"mIoU={fmt(miou)}")
    lines.append(f"Recall={fmt(recall)}")
    lines.append(f"masked_voxels={cm.masked_out}")
    return "\n".join(lines)
