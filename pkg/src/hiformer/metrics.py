"""Segmentation metrics: Dice, 95th-percentile Hausdorff, confusion rates.

All metrics compare integer label maps. Per-class values treat the class
as foreground one-vs-rest; macro averages run over foreground classes
(label 0 is background). hd95 on an empty mask has no boundary and
returns infinity; aggregation excludes such pairs and counts them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

METRIC_KEYS = ("dsc", "hd95", "se", "sp", "acc", "miou")


def dice(pred, gt, cls):
    """2|A & B| / (|A| + |B|); 1.0 when both masks lack the class."""
    a = pred == cls
    b = gt == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary_points(mask):
    """Coordinates of foreground pixels with a 4-neighbor background.

    Outside the image counts as background, so a foreground region
    touching the border contributes its border pixels.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def hd95(pred, gt):
    """Max over both directions of the 95th percentile of boundary
    nearest-neighbor distances; inf when either mask is empty."""
    pa = boundary_points(pred)
    pb = boundary_points(gt)
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    return float(max(np.percentile(da, 95), np.percentile(db, 95)))


def confusion_counts(pred, gt, cls):
    a = pred == cls
    b = gt == cls
    tp = int(np.logical_and(a, b).sum())
    fp = int(np.logical_and(a, ~b).sum())
    fn = int(np.logical_and(~a, b).sum())
    tn = int(np.logical_and(~a, ~b).sum())
    return tp, fp, fn, tn


def _safe_ratio(num, denom):
    # Degenerate class absent from both masks: score 1.0 by convention,
    # consistent with dice on two empty masks.
    return num / denom if denom else 1.0


def confusion_metrics(pred, gt, cls):
    """(sensitivity, specificity, accuracy, IoU) for one class."""
    tp, fp, fn, tn = confusion_counts(pred, gt, cls)
    se = _safe_ratio(tp, tp + fn)
    sp = _safe_ratio(tn, tn + fp)
    acc = (tp + tn) / (tp + fp + fn + tn)
    iou = _safe_ratio(tp, tp + fp + fn)
    return se, sp, acc, iou


def per_class_metrics(pred, gt, num_classes):
    """Metric dict per foreground class for one mask pair."""
    out = {}
    for cls in range(1, num_classes):
        se, sp, acc, iou = confusion_metrics(pred, gt, cls)
        out[cls] = {
            "dsc": dice(pred, gt, cls),
            "hd95": hd95(pred == cls, gt == cls),
            "se": se,
            "sp": sp,
            "acc": acc,
            "miou": iou,
        }
    return out


@dataclass
class MetricsReport:
    num_classes: int
    n_images: int
    per_class: dict  # cls -> {metric -> mean value}
    mean: dict  # metric -> macro mean over foreground classes
    hd95_excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "n_images": self.n_images,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "mean": self.mean,
            "hd95_excluded": self.hd95_excluded,
            **self.extra,
        }

    def format(self):
        head = "class " + "".join(f"{k:>10s}" for k in METRIC_KEYS)
        lines = [head]
        for cls in sorted(self.per_class):
            vals = self.per_class[cls]
            lines.append(
                f"{cls:>5d} " + "".join(f"{vals[k]:>10.4f}" for k in METRIC_KEYS)
            )
        lines.append(
            " mean " + "".join(f"{self.mean[k]:>10.4f}" for k in METRIC_KEYS)
        )
        if self.hd95_excluded:
            lines.append(
                f"(hd95 averaged over pairs with both masks nonempty; "
                f"{self.hd95_excluded} excluded)"
            )
        return "\n".join(lines)


def aggregate_metrics(pairs, num_classes):
    """Average per-class metrics over (pred, gt) mask pairs.

    hd95 averages only finite values; pairs where a class is absent from
    either mask are excluded from that class's hd95 mean and counted.
    """
    sums = {c: {k: 0.0 for k in METRIC_KEYS} for c in range(1, num_classes)}
    hd_counts = {c: 0 for c in range(1, num_classes)}
    excluded = 0
    n = 0
    for pred, gt in pairs:
        n += 1
        for cls, vals in per_class_metrics(pred, gt, num_classes).items():
            for k in METRIC_KEYS:
                if k == "hd95":
                    if np.isfinite(vals[k]):
                        sums[cls][k] += vals[k]
                        hd_counts[cls] += 1
                    else:
                        excluded += 1
                else:
                    sums[cls][k] += vals[k]
    if n == 0:
        raise ValueError("no mask pairs to aggregate")
    per_class = {}
    for cls in sums:
        per_class[cls] = {
            k: (sums[cls][k] / (hd_counts[cls] if k == "hd95" else n))
            if (k != "hd95" or hd_counts[cls]) else float("inf")
            for k in METRIC_KEYS
        }
    mean = {
        k: float(np.mean([
            per_class[c][k] for c in per_class if np.isfinite(per_class[c][k])
        ])) if any(np.isfinite(per_class[c][k]) for c in per_class) else float("inf")
        for k in METRIC_KEYS
    }
    if excluded:
        warnings.warn(
            f"hd95 undefined for {excluded} class/pair combinations "
            "(empty mask); excluded from averages",
            stacklevel=2,
        )
    return MetricsReport(
        num_classes=num_classes,
        n_images=n,
        per_class=per_class,
        mean=mean,
        hd95_excluded=excluded,
    )
