"""Hybrid segmentation loss: boundary-weighted BCE plus weighted IoU,
summed over the network's four output maps.

Each pixel is weighted by 1 + 5 * |local_mean(G) - G| where the local
mean uses a 31x31 window with edge-aware normalization, so pixels near
mask boundaries dominate. BCE is evaluated in logit space for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DataError, NumericError


def _as_float(t: torch.Tensor) -> torch.Tensor:
    """Promote bool/int tensors to float32; keep float64 as is."""
    return t if t.is_floating_point() else t.to(torch.float32)


def _as_nchw(t: torch.Tensor, name: str) -> torch.Tensor:
    if t.dim() == 2:
        t = t.unsqueeze(0).unsqueeze(0)
    elif t.dim() == 3:
        t = t.unsqueeze(1)
    if t.dim() != 4 or t.shape[1] != 1:
        raise DataError(f"{name} must be (B,1,H,W)-shaped, got {tuple(t.shape)}")
    return t


def _check_finite(t: torch.Tensor, name: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {name}")


def _check_binary(gt: torch.Tensor):
    if not torch.logical_or(gt == 0, gt == 1).all():
        raise DataError("loss targets must be binary {0,1} masks")


def pixel_weight(gt: torch.Tensor, window: int = 31, factor: float = 5.0) -> torch.Tensor:
    """Boundary-emphasis weights 1 + factor * |avgpool(G) - G|.

    The average pool is stride 1, same-size, and normalizes by the number
    of in-bounds pixels so border windows are true local means.
    """
    if window < 1 or window % 2 == 0:
        raise DataError(f"weight window must be odd and positive, got {window}")
    gt = _as_nchw(_as_float(gt), "gt")
    _check_finite(gt, "gt")
    _check_binary(gt)
    local = F.avg_pool2d(gt, window, stride=1, padding=window // 2,
                         count_include_pad=False)
    return 1.0 + factor * (local - gt).abs()


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-image weight-normalized BCE, averaged over the batch."""
    logits = _as_nchw(logits, "logits")
    gt = _as_nchw(_as_float(gt), "gt")
    weight = _as_nchw(weight, "weight")
    if logits.shape != gt.shape or weight.shape != gt.shape:
        raise DataError(f"loss shape mismatch: logits {tuple(logits.shape)}, "
                        f"gt {tuple(gt.shape)}, weight {tuple(weight.shape)}")
    _check_finite(logits, "logits")
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    per_image = (weight * bce).sum(dim=(1, 2, 3)) / weight.sum(dim=(1, 2, 3))
    return per_image.mean()


def weighted_iou(logits: torch.Tensor, gt: torch.Tensor, weight: torch.Tensor,
                 eps: float = 1.0) -> torch.Tensor:
    """Per-image weighted soft-IoU loss 1 - (inter + eps) / (union + eps)."""
    logits = _as_nchw(logits, "logits")
    gt = _as_nchw(_as_float(gt), "gt")
    weight = _as_nchw(weight, "weight")
    if logits.shape != gt.shape or weight.shape != gt.shape:
        raise DataError(f"loss shape mismatch: logits {tuple(logits.shape)}, "
                        f"gt {tuple(gt.shape)}, weight {tuple(weight.shape)}")
    _check_finite(logits, "logits")
    pred = torch.sigmoid(logits)
    inter = (weight * pred * gt).sum(dim=(1, 2, 3))
    union = (weight * (pred + gt - pred * gt)).sum(dim=(1, 2, 3))
    return (1.0 - (inter + eps) / (union + eps)).mean()


@dataclass
class LossBreakdown:
    """Total training loss plus the per-output BCE/IoU terms (floats)."""

    total: torch.Tensor
    wbce: list
    wiou: list

    @property
    def total_value(self) -> float:
        return float(self.total.detach())

    def to_dict(self) -> dict:
        return {
            "total": self.total_value,
            "outputs": [{"wbce": b, "wiou": i} for b, i in zip(self.wbce, self.wiou)],
        }


def total_loss(outputs, gt: torch.Tensor, window: int = 31) -> LossBreakdown:
    """Sum of weighted BCE + weighted IoU over all output logit maps.

    ``outputs`` is a sequence of same-shaped logit tensors (the network's
    four side outputs). The pixel weights are computed once from ``gt``.
    """
    outputs = list(outputs)
    if not outputs:
        raise DataError("total_loss needs at least one output map")
    gt = _as_nchw(_as_float(gt), "gt")
    weight = pixel_weight(gt, window=window)
    total = None
    wbce, wiou = [], []
    for logits in outputs:
        b = weighted_bce(logits, gt, weight)
        i = weighted_iou(logits, gt, weight)
        term = b + i
        total = term if total is None else total + term
        wbce.append(float(b.detach()))
        wiou.append(float(i.detach()))
    _check_finite(total, "loss")
    return LossBreakdown(total, wbce, wiou)
