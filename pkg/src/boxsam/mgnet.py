"""Mask-guided segmentation network.

A four-level feature pyramid (strides 4/8/16/32) feeds three decoder
stages:

* a cascaded decoder that fuses the three deepest levels with the
  attention-refined shallowest level into a coarse guidance map,
* a per-level context block with parallel dilated branches,
* a top-down aggregation path in which the sigmoid of the guidance map
  and its complement gate the upsampled coarser state and the current
  context features separately before fusion.

Each stage can be disabled independently (``use_cmd`` / ``use_cem`` /
``use_mfam``) and is replaced by a strictly smaller fallback, so enabling
any stage strictly increases the parameter count.

Features can come from the built-in tiny encoder or from per-sample
``.npz`` files via ExternalFeatureAdapter.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

STRIDES = (4, 8, 16, 32)


def seed_everything(seed: int, deterministic: bool = True):
    """Seed python/numpy/torch RNGs; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def upsample_to(x: torch.Tensor, like) -> torch.Tensor:
    """Bilinear resize to the spatial size of ``like`` (tensor or (H, W))."""
    size = like.shape[-2:] if isinstance(like, torch.Tensor) else tuple(like)
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Sequential):
    """Conv (same padding, no bias) + BatchNorm + ReLU."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, dilation=1):
        padding = dilation * (kernel - 1) // 2
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class ConvBN(nn.Sequential):
    """Conv (same padding, no bias) + BatchNorm, no activation."""

    def __init__(self, in_ch, out_ch, kernel=3, dilation=1):
        padding = dilation * (kernel - 1) // 2
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
        )


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Sequential channel then spatial attention, both multiplicative."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)


class ResidualChannelBlock(nn.Module):
    """Residual conv-PReLU-conv block gated by channel attention.

    With both conv biases zeroed, a zero input maps to exactly zero.
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        hidden = max(channels // reduction, 1)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        res = self.conv2(self.act(self.conv1(x)))
        res = res * self.gate(res)
        return x + res


class CascadedMaskDecoder(nn.Module):
    """Fuses the pyramid into a single-channel stride-4 guidance logit map.

    Cascade path: F2..F4 are progressively upsampled and concatenated,
    then fused at stride 8; the attention-refined F1 is projected 1x1 and
    added to the upsampled fusion. Fallback (use_cascade=False): the
    projection of F1 alone. The head conv is plain (bias, no norm) so the
    output is an unbounded logit map.
    """

    def __init__(self, channels, width, use_cascade=True):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.use_cascade = use_cascade
        if use_cascade:
            self.refine = CBAM(c1)
            self.high = ConvBNReLU(c2 + c3 + c4, width, 3)
        self.low = ConvBNReLU(c1, width, 1)
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, f1, f2, f3, f4):
        if self.use_cascade:
            low = self.low(self.refine(f1))
            cascade = torch.cat([upsample_to(f4, f3), f3], dim=1)
            cascade = torch.cat([upsample_to(cascade, f2), f2], dim=1)
            high = self.high(cascade)
            fused = low + upsample_to(high, low)
        else:
            fused = self.low(f1)
        return self.head(fused), fused


class DilatedBranch(nn.Module):
    """Two stacked dilated convs; their outputs concatenate back to width."""

    def __init__(self, width, dilation):
        super().__init__()
        half = width // 2
        self.conv_a = ConvBN(width, half, 3, dilation=dilation)
        self.conv_b = ConvBN(half, half, 3, dilation=dilation)

    def forward(self, x):
        a = self.conv_a(x)
        return torch.cat([a, self.conv_b(a)], dim=1)


class ContextEnhancement(nn.Module):
    """Multi-dilation context block at a common width.

    The input is projected 1x1 to ``width``; three branches with dilation
    1/3/5 are summed and normalized, added to a residual-attention view of
    the projection, fused 3x3, and rectified.
    """

    def __init__(self, in_ch, width, dilations=(1, 3, 5)):
        super().__init__()
        self.proj = ConvBNReLU(in_ch, width, 1)
        self.branches = nn.ModuleList(DilatedBranch(width, d) for d in dilations)
        self.norm = nn.BatchNorm2d(width)
        self.detail = ResidualChannelBlock(width)
        self.fuse = ConvBN(width, width, 3)

    def forward(self, x):
        x = self.proj(x)
        mixed = self.norm(sum(branch(x) for branch in self.branches))
        return F.relu(self.fuse(self.detail(x) + mixed))


class ChannelProjection(nn.Module):
    """1x1 width projection; the context block's ablation stand-in."""

    def __init__(self, in_ch, width):
        super().__init__()
        self.proj = ConvBNReLU(in_ch, width, 1)

    def forward(self, x):
        return self.proj(x)


class MaskGuidedAggregation(nn.Module):
    """One top-down step gated by the guidance map.

    S = sigmoid(guidance resized to this level), B = 1 - S. S and B gate
    the upsampled coarser state and the current context features in two
    parallel fusions; their concat is fused again and added to both
    ungated inputs.
    """

    def __init__(self, width):
        super().__init__()
        self.fuse_up = ConvBNReLU(2 * width, width, 3)
        self.fuse_cur = ConvBNReLU(2 * width, width, 3)
        self.fuse_out = ConvBNReLU(2 * width, width, 3)

    def forward(self, context, coarser, guidance_logits):
        s = torch.sigmoid(upsample_to(guidance_logits, context))
        b = 1.0 - s
        up = upsample_to(coarser, context)
        gated_up = self.fuse_up(torch.cat([s * up, b * up], dim=1))
        gated_cur = self.fuse_cur(torch.cat([s * context, b * context], dim=1))
        out = self.fuse_out(torch.cat([gated_up, gated_cur], dim=1)) + up + context
        return out, s, b


class PlainAggregation(nn.Module):
    """Aggregation without guidance gating: concat of the upsampled coarser
    state, the context features, and their product, fused 3x3."""

    def __init__(self, width):
        super().__init__()
        self.fuse = ConvBNReLU(3 * width, width, 3)

    def forward(self, context, coarser, guidance_logits):
        up = upsample_to(coarser, context)
        return self.fuse(torch.cat([up, context, up * context], dim=1)), None, None


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


class TinyPyramidEncoder(nn.Module):
    """Small strided-conv encoder emitting a stride-4/8/16/32 pyramid."""

    def __init__(self, channels=(16, 32, 64, 128), depth=1):
        super().__init__()
        c1 = channels[0]
        self.stem = ConvBNReLU(3, c1, 3, stride=2)

        def stage(in_ch, out_ch):
            layers = [ConvBNReLU(in_ch, out_ch, 3, stride=2)]
            layers += [ConvBNReLU(out_ch, out_ch, 3) for _ in range(depth - 1)]
            return nn.Sequential(*layers)

        self.stage1 = stage(c1, channels[0])
        self.stage2 = stage(channels[0], channels[1])
        self.stage3 = stage(channels[1], channels[2])
        self.stage4 = stage(channels[2], channels[3])

    def forward(self, x) -> FeaturePyramid:
        f1 = self.stage1(self.stem(x))
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return FeaturePyramid(f1, f2, f3, f4)


@dataclass
class MGNetConfig:
    """Architecture knobs. ``width`` is the common decoder width and must
    be even (dilated branches split it in half) and at least 8."""

    encoder: str = "tiny"
    encoder_channels: tuple = (16, 32, 64, 128)
    encoder_depth: int = 1
    width: int = 64
    input_size: tuple = (480, 480)
    use_cmd: bool = True
    use_cem: bool = True
    use_mfam: bool = True
    deterministic: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        if self.encoder not in ("tiny", "external"):
            raise ConfigError(f"encoder: unknown kind {self.encoder!r}")
        if len(self.encoder_channels) != 4 or min(self.encoder_channels) < 1:
            raise ConfigError(f"encoder_channels: need 4 positive values, "
                              f"got {self.encoder_channels}")
        if self.encoder_depth < 1:
            raise ConfigError(f"encoder_depth: must be >= 1, got {self.encoder_depth}")
        if self.width < 8 or self.width % 2:
            raise ConfigError(f"width: must be even and >= 8, got {self.width}")
        if len(self.input_size) != 2 or any(s % 32 or s < 32 for s in self.input_size):
            raise ConfigError(f"input_size: each side must be a positive "
                              f"multiple of 32, got {self.input_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MGNetConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown MGNet config fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class MGNetOutputs:
    """Everything a forward pass produces.

    p1..p4 are full-resolution logit maps (p1 is the final prediction).
    guidance_logits is the stride-4 map before resizing; contexts are the
    per-level feature maps entering aggregation; mids the aggregation
    states M3..M1; guides the (S, B) gate pairs per step (None entries
    when gating is disabled).
    """

    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    guidance_logits: torch.Tensor
    contexts: list
    mids: list
    guides: list

    def as_tuple(self):
        return (self.p1, self.p2, self.p3, self.p4)


class MGNet(nn.Module):
    """Mask-guided segmentation network over a four-level pyramid."""

    def __init__(self, config: MGNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        channels = config.encoder_channels
        width = config.width
        self.encoder = (TinyPyramidEncoder(channels, config.encoder_depth)
                        if config.encoder == "tiny" else None)
        self.decoder = CascadedMaskDecoder(channels, width, use_cascade=config.use_cmd)
        context_cls = ContextEnhancement if config.use_cem else ChannelProjection
        self.contexts = nn.ModuleList(context_cls(c, width) for c in channels)
        agg_cls = MaskGuidedAggregation if config.use_mfam else PlainAggregation
        self.aggregations = nn.ModuleList(agg_cls(width) for _ in range(3))
        self.heads = nn.ModuleList(nn.Conv2d(width, 1, 3, padding=1) for _ in range(3))

    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        if self.encoder is None:
            raise ConfigError("encoder='external': call decode() with a "
                              "FeaturePyramid instead of forward()")
        if x.dim() != 4 or x.shape[1] != 3:
            raise DataError(f"input must be (B,3,H,W), got {tuple(x.shape)}")
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise DataError(f"input H and W must be multiples of 32, "
                            f"got {tuple(x.shape[-2:])}")
        return self.encoder(x)

    def decode(self, pyramid: FeaturePyramid, out_size=None) -> MGNetOutputs:
        f1 = pyramid.f1
        out_size = tuple(out_size) if out_size else (f1.shape[-2] * 4, f1.shape[-1] * 4)
        guidance, _ = self.decoder(*pyramid)
        ctx = [block(f) for block, f in zip(self.contexts, pyramid)]

        state = ctx[3]
        mids, guides, side_logits = [], [], []
        for step, level in enumerate((2, 1, 0)):
            state, s, b = self.aggregations[step](ctx[level], state, guidance)
            mids.append(state)
            guides.append((s, b))
            side_logits.append(self.heads[step](state))

        p3, p2, p1 = (upsample_to(p, out_size) for p in side_logits)
        p4 = upsample_to(guidance, out_size)
        return MGNetOutputs(p1, p2, p3, p4, guidance, ctx, mids, guides)

    def forward(self, x: torch.Tensor) -> MGNetOutputs:
        return self.decode(self.encode(x), out_size=x.shape[-2:])


class ExternalFeatureAdapter:
    """Loads per-sample ``<id>.npz`` pyramids (keys f1..f4) for a frozen
    external backbone; validates channel counts and the stride law."""

    def __init__(self, directory, config: MGNetConfig):
        self.directory = Path(directory)
        self.config = config

    def load(self, sample_id: str) -> FeaturePyramid:
        path = self.directory / f"{sample_id}.npz"
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        archive = np.load(path)
        h, w = self.config.input_size
        feats = []
        for i, (key, channels) in enumerate(zip(("f1", "f2", "f3", "f4"),
                                                self.config.encoder_channels)):
            if key not in archive:
                raise DataError(f"{path}: missing array {key!r}")
            arr = archive[key]
            expected = (channels, h // STRIDES[i], w // STRIDES[i])
            if arr.shape != expected:
                raise DataError(f"{path}: {key} has shape {arr.shape}, "
                                f"expected {expected}")
            feats.append(torch.from_numpy(np.ascontiguousarray(arr))
                         .float().unsqueeze(0))
        return FeaturePyramid(*feats)


def build_mgnet(config: MGNetConfig, seed: int = 0) -> MGNet:
    """Construct an MGNet with seeded, reproducible initialization."""
    seed_everything(seed, deterministic=config.deterministic)
    return MGNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
