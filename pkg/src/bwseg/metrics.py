"""Segmentation metrics: Dice, Jaccard, sensitivity, specificity (percent) and
the symmetric 95th-percentile Hausdorff distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .tensor import ShapeError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.tp.size

    @property
    def gt_present(self) -> np.ndarray:
        return (self.tp + self.fn) > 0

    @property
    def pred_present(self) -> np.ndarray:
        return (self.tp + self.fp) > 0


@dataclass
class MetricResult:
    per_class: np.ndarray
    mean: float
    undefined: np.ndarray  # class present in gt but the denominator was 0


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> ConfusionCounts:
    """One-vs-rest counts for every class."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError("confusion", pred.shape, gt.shape)
    n = gt.size
    idx = gt.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    mat = np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(mat).astype(np.int64)
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp
    tn = n - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def _rate(num, den, counts: ConfusionCounts, exclude_background: bool) -> MetricResult:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    present = counts.gt_present.copy()
    undefined = present & (den == 0)
    per_class = np.where(den > 0, 100.0 * num / np.where(den > 0, den, 1.0), 0.0)
    counted = present.copy()
    if exclude_background:
        counted[0] = False
    mean = float(per_class[counted].mean()) if counted.any() else float("nan")
    return MetricResult(per_class, mean, undefined)


def dice(counts: ConfusionCounts, exclude_background: bool = False) -> MetricResult:
    return _rate(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, counts, exclude_background)


def jaccard(counts: ConfusionCounts, exclude_background: bool = False) -> MetricResult:
    return _rate(counts.tp, counts.tp + counts.fp + counts.fn, counts, exclude_background)


def sensitivity(counts: ConfusionCounts, exclude_background: bool = False) -> MetricResult:
    return _rate(counts.tp, counts.tp + counts.fn, counts, exclude_background)


def specificity(counts: ConfusionCounts, exclude_background: bool = False) -> MetricResult:
    return _rate(counts.tn, counts.tn + counts.fp, counts, exclude_background)


def all_rates(pred, gt, n_classes: int, exclude_background: bool = False) -> dict[str, MetricResult]:
    counts = confusion(pred, gt, n_classes)
    return {"DC": dice(counts, exclude_background), "JA": jaccard(counts, exclude_background),
            "SE": sensitivity(counts, exclude_background), "SP": specificity(counts, exclude_background)}


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or off the frame."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def directed_percentile(src: np.ndarray, dst: np.ndarray, q: float = 95.0) -> float:
    """q-th percentile (linear interpolation) of nearest distances src -> dst."""
    d, _ = cKDTree(dst).query(src)
    return float(np.percentile(d, q))


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary Hausdorff distance.

    Returns NaN (with a warning) when either mask is empty.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError("hd95", pred.shape, gt.shape)
    if not pred.any() or not gt.any():
        warnings.warn("hd95 undefined for an empty mask; excluded from means", RuntimeWarning, stacklevel=2)
        return float("nan")
    sp = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary(pred)) * sp
    b = np.argwhere(boundary(gt)) * sp
    return max(directed_percentile(a, b), directed_percentile(b, a))


def evaluate(pred: np.ndarray, gt: np.ndarray, n_classes: int, exclude_background: bool = False,
             spacing=(1.0, 1.0)) -> list[dict]:
    """Per-class rows of DC/JA/SE/SP/HD95 for one image."""
    rates = all_rates(pred, gt, n_classes, exclude_background)
    rows = []
    for c in range(n_classes):
        if exclude_background and c == 0:
            continue
        if not (np.any(gt == c) or np.any(pred == c)):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            hd = hd95(pred == c, gt == c, spacing)
        rows.append({"class": c, **{k: float(v.per_class[c]) for k, v in rates.items()}, "HD95": hd})
    return rows


def summarize(per_image: list[dict[str, MetricResult]]) -> dict[str, float]:
    """Mean over images of each image's class-macro-mean."""
    keys = per_image[0].keys() if per_image else ()
    return {k: float(np.nanmean([r[k].mean for r in per_image])) for k in keys}
