"""Independent reference implementations used to cross-check the package.

Everything here is written the slow, obvious way (explicit loops,
flood fill, brute-force windows) on purpose: these functions answer
"what should the result be" without sharing code or vectorization
tricks with the implementations under test.
"""

import math
from collections import deque

import numpy as np


def flood_fill_components(mask, connectivity=8):
    """Label components by BFS flood fill in raster-scan discovery order.

    Returns (labels, count); labels are 1..count, assigned in the order
    components are first met scanning rows then columns.
    """
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 8:
        steps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and labels[y, x] == 0:
                count += 1
                queue = deque([(y, x)])
                labels[y, x] = count
                while queue:
                    cy, cx = queue.popleft()
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                                and labels[ny, nx] == 0:
                            labels[ny, nx] = count
                            queue.append((ny, nx))
    return labels, count


def boxes_overlap(a, b):
    """Positive-area overlap of [x0,y0,x1,y1) boxes."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def merge_boxes_fixed_point(boxes):
    """Repeatedly union any overlapping pair until no pair overlaps."""
    boxes = [list(b) for b in boxes]
    while True:
        merged_any = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if boxes_overlap(boxes[i], boxes[j]):
                    a, b = boxes[i], boxes[j]
                    union = [min(a[0], b[0]), min(a[1], b[1]),
                             max(a[2], b[2]), max(a[3], b[3])]
                    boxes = [boxes[k] for k in range(len(boxes)) if k not in (i, j)]
                    boxes.append(union)
                    merged_any = True
                    break
            if merged_any:
                break
        if not merged_any:
            return sorted(tuple(b) for b in boxes)


def component_keep_rule(label, pred, tau=0.0, connectivity=8):
    """Literal two-pass statement of the component-keep rule.

    Pass 1 finds, for each labeled component, whether any of its pixels
    has pred > tau. Pass 2 writes each pixel from its component's verdict.
    """
    label = np.asarray(label) > 0
    pred = np.asarray(pred, dtype=np.float64)
    comp, count = flood_fill_components(label, connectivity)
    keep = [False] * (count + 1)
    h, w = label.shape
    for y in range(h):
        for x in range(w):
            if comp[y, x] and pred[y, x] > tau:
                keep[comp[y, x]] = True
    out = np.zeros((h, w), dtype=np.float32)
    for y in range(h):
        for x in range(w):
            if comp[y, x] and keep[comp[y, x]]:
                out[y, x] = 1.0
    return out


def local_mean_valid(gt, window):
    """Per-pixel mean over a window x window neighborhood, dividing by the
    number of in-bounds pixels (no zero padding in the denominator)."""
    gt = np.asarray(gt, dtype=np.float64)
    h, w = gt.shape
    r = window // 2
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            out[y, x] = gt[y0:y1, x0:x1].sum() / ((y1 - y0) * (x1 - x0))
    return out


def naive_weighted_bce(logits, gt, weight):
    """Loop summation of weight-normalized BCE, averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    totals = []
    for b in range(logits.shape[0]):
        num = den = 0.0
        for y in range(logits.shape[2]):
            for x in range(logits.shape[3]):
                z, g, w = logits[b, 0, y, x], gt[b, 0, y, x], weight[b, 0, y, x]
                p = 1.0 / (1.0 + math.exp(-z))
                bce = -(g * math.log(p) + (1 - g) * math.log(1 - p))
                num += w * bce
                den += w
        totals.append(num / den)
    return float(np.mean(totals))


def naive_weighted_iou(logits, gt, weight, eps=1.0):
    """Loop summation of the weighted soft-IoU loss."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    totals = []
    for b in range(logits.shape[0]):
        inter = union = 0.0
        for y in range(logits.shape[2]):
            for x in range(logits.shape[3]):
                z, g, w = logits[b, 0, y, x], gt[b, 0, y, x], weight[b, 0, y, x]
                p = 1.0 / (1.0 + math.exp(-z))
                inter += w * p * g
                union += w * (p + g - p * g)
        totals.append(1.0 - (inter + eps) / (union + eps))
    return float(np.mean(totals))


def confusion_f_measure(pred, gt, threshold, beta2=0.3):
    """F-measure from explicit TP/FP/FN counts at a fixed threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    binarized = pred >= threshold if threshold > 0 else pred > 0
    tp = fp = fn = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            if binarized[y, x] and gt[y, x]:
                tp += 1
            elif binarized[y, x]:
                fp += 1
            elif gt[y, x]:
                fn += 1
    if tp + fp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if beta2 * precision + recall == 0:
        return 0.0
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


def s_measure_reference(pred, gt, alpha=0.5):
    """Transliteration of the structural measure with explicit region code."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if gt.sum() == 0:
        return 1.0 - pred.mean()
    if gt.sum() == gt.size:
        return float(pred.mean())

    def object_term(values):
        if values.size == 0:
            return 0.0
        m = values.mean()
        s = values.std(ddof=1) if values.size > 1 else 0.0
        return 2.0 * m / (m * m + 1.0 + s + 1e-12)

    mu = gt.mean()
    s_o = mu * object_term(pred[gt]) + (1 - mu) * object_term(1.0 - pred[~gt])

    ys, xs = np.nonzero(gt)
    cy, cx = int(round(ys.mean())), int(round(xs.mean()))
    h, w = gt.shape

    def ssim_term(p, g):
        n = p.size
        if n == 0:
            return 0.0
        x_m, y_m = p.mean(), g.mean()
        norm = n - 1 if n > 1 else 1
        sx = ((p - x_m) ** 2).sum() / norm
        sy = ((g - y_m) ** 2).sum() / norm
        sxy = ((p - x_m) * (g - y_m)).sum() / norm
        a = 4 * x_m * y_m * sxy
        b = (x_m ** 2 + y_m ** 2) * (sx + sy)
        if a != 0:
            return a / (b + 1e-12)
        return 1.0 if b == 0 else 0.0

    s_r = 0.0
    quads = [(slice(0, cy + 1), slice(0, cx + 1)),
             (slice(0, cy + 1), slice(cx + 1, w)),
             (slice(cy + 1, h), slice(0, cx + 1)),
             (slice(cy + 1, h), slice(cx + 1, w))]
    gtf = gt.astype(np.float64)
    for rows, cols in quads:
        weight = pred[rows, cols].size / (h * w)
        s_r += weight * ssim_term(pred[rows, cols], gtf[rows, cols])

    return float(min(max(alpha * s_o + (1 - alpha) * s_r, 0.0), 1.0))


def e_measure_reference(pred, gt, n_thresholds=256):
    """Loop transliteration of the mean enhanced-alignment measure."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    h, w = gt.shape
    n = h * w
    scores = []
    for k in range(n_thresholds):
        t = (k + 0.5) / n_thresholds
        binp = pred > t
        if gt.sum() == 0:
            enhanced = 1.0 - binp.astype(np.float64)
        elif gt.sum() == n:
            enhanced = binp.astype(np.float64)
        else:
            phi_g = gt.astype(np.float64) - gt.mean()
            phi_p = binp.astype(np.float64) - binp.mean()
            align = 2 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + 1e-12)
            enhanced = (align + 1) ** 2 / 4
        scores.append(enhanced.sum() / n)
    return float(np.mean(scores))


def global_dice_iou(pred, gt, threshold=0.5):
    """Set-based dice and IoU at a fixed threshold."""
    p = {(y, x) for y, x in zip(*np.nonzero(np.asarray(pred) >= threshold))}
    g = {(y, x) for y, x in zip(*np.nonzero(np.asarray(gt) > 0.5))}
    if not p and not g:
        return 1.0, 1.0
    inter = len(p & g)
    union = len(p | g)
    dice = 2 * inter / (len(p) + len(g)) if (p or g) else 1.0
    return dice, inter / union
