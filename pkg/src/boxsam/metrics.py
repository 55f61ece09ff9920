"""Segmentation evaluation: MAE, adaptive F, S-measure, mean E-measure,
Dice and IoU, plus dataset-level aggregation.

Predictions are float maps in [0, 1]; ground truth is binary. GT arrays
loaded from files are binarized at 0.5 before scoring. All metrics return
values in [0, 1] and are computed in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_mask
from .errors import DataError, UndefinedMetricError

_EPS = 1e-12


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"pred/gt shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2:
        raise DataError(f"metrics expect 2-D maps, got {pred.shape}")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    """Mean absolute error between prediction and ground truth."""
    pred, gtb = _check_pair(pred, gt)
    return float(np.abs(pred - gtb.astype(np.float64)).mean())


def f_adaptive(pred, gt, beta2: float = 0.3) -> float:
    """F-measure at the adaptive threshold min(2 * mean(pred), 1).

    Returns 0 when the binarized prediction is empty. Raises
    UndefinedMetricError for an empty ground truth (recall undefined).
    """
    pred, gtb = _check_pair(pred, gt)
    if not gtb.any():
        raise UndefinedMetricError("adaptive F-measure undefined for empty GT")
    threshold = min(2.0 * float(pred.mean()), 1.0)
    binarized = pred >= threshold if threshold > 0 else pred > 0
    n_pos = int(binarized.sum())
    if n_pos == 0:
        return 0.0
    tp = float(np.logical_and(binarized, gtb).sum())
    precision = tp / n_pos
    recall = tp / float(gtb.sum())
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return float((1.0 + beta2) * precision * recall / denom)


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    m = float(values.mean())
    s = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * m / (m * m + 1.0 + s + _EPS)


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = float(pred.mean()), float(gt.mean())
    norm = n - 1 if n > 1 else 1
    sx2 = float(((pred - x) ** 2).sum()) / norm
    sy2 = float(((gt - y) ** 2).sum()) / norm
    sxy = float(((pred - x) * (gt - y)).sum()) / norm
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx2 + sy2)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structural similarity: object-aware and region-aware terms.

    Degenerate GT falls back to 1 - mean(pred) (empty) or mean(pred)
    (full). The combined score is clamped to [0, 1].
    """
    pred, gtb = _check_pair(pred, gt)
    if not gtb.any():
        return float(1.0 - pred.mean())
    if gtb.all():
        return float(pred.mean())
    gtf = gtb.astype(np.float64)

    mu = float(gtf.mean())
    s_obj = mu * _object_score(pred[gtb]) + (1.0 - mu) * _object_score(1.0 - pred[~gtb])

    ys, xs = np.nonzero(gtb)
    cy = int(np.round(ys.mean()))
    cx = int(np.round(xs.mean()))
    h, w = gtb.shape
    total = float(h * w)
    s_reg = 0.0
    for rows in (slice(0, cy + 1), slice(cy + 1, h)):
        for cols in (slice(0, cx + 1), slice(cx + 1, w)):
            p_r, g_r = pred[rows, cols], gtf[rows, cols]
            s_reg += (p_r.size / total) * _region_ssim(p_r, g_r)

    return float(np.clip(alpha * s_obj + (1.0 - alpha) * s_reg, 0.0, 1.0))


def _alignment_score(binarized: np.ndarray, gtb: np.ndarray) -> float:
    if not gtb.any():
        enhanced = 1.0 - binarized.astype(np.float64)
    elif gtb.all():
        enhanced = binarized.astype(np.float64)
    else:
        phi_g = gtb.astype(np.float64) - gtb.mean()
        phi_p = binarized.astype(np.float64) - binarized.mean()
        align = 2.0 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def e_measure_mean(pred, gt, n_thresholds: int = 256) -> float:
    """Enhanced-alignment score averaged over evenly spaced thresholds.

    Thresholds are the midpoints of n equal bins of [0, 1], so an exact
    binary match scores 1 at every threshold.
    """
    pred, gtb = _check_pair(pred, gt)
    thresholds = (np.arange(n_thresholds) + 0.5) / n_thresholds
    scores = [_alignment_score(pred > t, gtb) for t in thresholds]
    return float(np.mean(scores))


def dice_iou(pred, gt, threshold: float = 0.5):
    """Region-level (dice, iou) of the thresholded prediction; (1, 1) when
    both sets are empty."""
    pred, gtb = _check_pair(pred, gt)
    p = pred >= threshold
    inter = float(np.logical_and(p, gtb).sum())
    union = float(np.logical_or(p, gtb).sum())
    if union == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (float(p.sum()) + float(gtb.sum()))
    return float(dice), float(inter / union)


METRIC_NAMES = ("mae", "f_adaptive", "s_alpha", "e_phi", "dice", "iou")


@dataclass
class MetricReport:
    """Per-image scores, their arithmetic means, and recorded skips."""

    per_image: dict
    means: dict
    count: int
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "means": self.means,
            "count": self.count,
            "skipped": self.skipped,
        }

    def table(self) -> str:
        """Plain-text table in the conventional column order S, F, MAE, E."""
        header = f"{'image':<20} {'S':>7} {'F':>7} {'MAE':>7} {'E':>7} {'Dice':>7} {'IoU':>7}"
        lines = [header, "-" * len(header)]

        def fmt(row):
            def cell(value):
                return f"{value:7.3f}" if value is not None else f"{'n/a':>7}"

            keys = ("s_alpha", "f_adaptive", "mae", "e_phi", "dice", "iou")
            return " ".join(cell(row[key]) for key in keys)

        for name in sorted(self.per_image):
            lines.append(f"{name:<20} {fmt(self.per_image[name])}")
        lines.append("-" * len(header))
        lines.append(f"{'mean':<20} {fmt(self.means)}")
        return "\n".join(lines)


def evaluate_pair(pred, gt) -> dict:
    """All six metrics for one prediction/GT pair; F is None for empty GT."""
    scores = {"mae": mae(pred, gt)}
    try:
        scores["f_adaptive"] = f_adaptive(pred, gt)
    except UndefinedMetricError:
        scores["f_adaptive"] = None
    scores["s_alpha"] = s_measure(pred, gt)
    scores["e_phi"] = e_measure_mean(pred, gt)
    scores["dice"], scores["iou"] = dice_iou(pred, gt)
    return scores


def evaluate_pairs(named_pairs) -> MetricReport:
    """Aggregate (sample_id, pred, gt) triples into a MetricReport."""
    per_image, skipped = {}, []
    for sample_id, pred, gt in named_pairs:
        scores = evaluate_pair(pred, gt)
        if scores["f_adaptive"] is None:
            skipped.append({"id": sample_id, "metric": "f_adaptive",
                            "reason": "empty ground truth"})
        per_image[sample_id] = scores
    if not per_image:
        raise DataError("no prediction/GT pairs to evaluate")
    means = {}
    for name in METRIC_NAMES:
        values = [row[name] for row in per_image.values() if row[name] is not None]
        means[name] = float(np.mean(values)) if values else None
    return MetricReport(per_image, means, len(per_image), skipped)


def evaluate_dirs(pred_dir, gt_dir) -> MetricReport:
    """Evaluate matching PNG stems of a prediction dir against a GT dir."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pairs = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise DataError(f"no ground truth for prediction {pred_path.name}")
        pairs.append((pred_path.stem, load_mask(pred_path), load_mask(gt_path)))
    return evaluate_pairs(pairs)
