"""Deterministic generator of camouflage-like synthetic datasets.

Backgrounds are multi-octave value noise; foreground blobs are thresholded
smoothed noise (irregular contours) textured with the background palette
shifted by a configurable contrast. Every sample is a pure function of
(seed, index), so generation is reproducible and parallel-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from . import data
from .errors import ConfigError, DataError


@dataclass
class SynthConfig:
    count: int = 16
    size: tuple = (96, 96)
    objects_per_image: tuple = (1, 2)
    contrast: float = 0.5
    blob_scale: tuple = (12, 24)
    seed: int = 0

    def validate(self) -> "SynthConfig":
        h, w = self.size
        if h % 32 or w % 32:
            raise ConfigError(f"size must be divisible by 32, got {self.size}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if not (0.0 < self.contrast <= 1.0):
            raise ConfigError(f"contrast must lie in (0, 1], got {self.contrast}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        lo, hi = self.blob_scale
        if not (4 <= lo <= hi <= min(self.size) - 4):
            raise ConfigError(f"bad blob_scale range {self.blob_scale}")
        return self


def _value_noise(rng: np.random.Generator, shape, octaves: int = 3) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, normalized to [0, 1]."""
    h, w = shape
    acc = np.zeros((h, w), dtype=np.float64)
    amp, total = 1.0, 0.0
    for octave in range(octaves):
        cells = 2 ** (octave + 2)
        grid = rng.random((cells, cells))
        up = ndi.zoom(grid, (h / cells, w / cells), order=1, grid_mode=True, mode="nearest")
        acc += amp * up[:h, :w]
        total += amp
        amp *= 0.5
    acc /= total
    span = acc.max() - acc.min()
    return (acc - acc.min()) / (span + 1e-12)


def blob_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    """Irregular blob: thresholded smooth noise, largest component, cropped."""
    field = _value_noise(rng, (size, size), octaves=2)
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    radial = ((yy - center) ** 2 + (xx - center) ** 2) / (center + 1e-9) ** 2
    # bias toward the patch center so the blob stays compact
    score = field - 0.6 * radial
    blob = score > np.quantile(score, 0.72)
    labels, n = ndi.label(blob, structure=np.ones((3, 3)))
    if n == 0:
        blob = radial <= 0.25
        labels, n = ndi.label(blob, structure=np.ones((3, 3)))
    sizes = ndi.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    keep = int(np.argmax(sizes)) + 1
    blob = labels == keep
    ys, xs = np.nonzero(blob)
    return blob[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _place_blobs(rng: np.random.Generator, size, n_objects: int, blob_scale) -> np.ndarray:
    """Stamp blobs so their tight boxes stay pairwise disjoint (1 px apart)."""
    h, w = size
    gt = np.zeros((h, w), dtype=bool)
    taken = []  # padded boxes of placed blobs
    for _ in range(n_objects):
        placed = False
        for _attempt in range(500):
            span = int(rng.integers(blob_scale[0], blob_scale[1] + 1))
            blob = blob_shape(rng, span)
            bh, bw = blob.shape
            if bh >= h - 2 or bw >= w - 2:
                continue
            y0 = int(rng.integers(1, h - bh))
            x0 = int(rng.integers(1, w - bw))
            box = data.BBox(x0 - 1, y0 - 1, x0 + bw + 1, y0 + bh + 1)
            if any(box.intersects(t) for t in taken):
                continue
            gt[y0:y0 + bh, x0:x0 + bw] |= blob
            taken.append(box)
            placed = True
            break
        if not placed:
            raise DataError(
                f"could not place {n_objects} disjoint blobs of scale {blob_scale} "
                f"in a {h}x{w} image")
    return gt


def render_sample(config: SynthConfig, index: int):
    """Render one (pixels, gt_mask) pair; pure in (config.seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    h, w = config.size
    lo, hi = config.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))

    base = 0.15 + 0.35 * _value_noise(rng, (h, w), octaves=3)
    chroma = np.stack([_value_noise(rng, (h, w), octaves=2) for _ in range(3)], axis=-1)
    pixels = base[..., None] + 0.06 * (chroma - 0.5)

    gt = _place_blobs(rng, (h, w), n_objects, config.blob_scale)
    fg_texture = _value_noise(rng, (h, w), octaves=2)
    shift = config.contrast * 0.5 * (0.84 + 0.32 * fg_texture)
    pixels = pixels + shift[..., None] * gt[..., None]
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return pixels, gt.astype(np.float32)


def generate(config: SynthConfig, out_dir, split: str = "train") -> data.DatasetManifest:
    """Write images, GT masks and a manifest with merged GT-derived boxes."""
    config.validate()
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for index in range(config.count):
        pixels, gt = render_sample(config, index)
        sample_id = f"{split}_{index:04d}"
        image_path = image_dir / f"{sample_id}.png"
        mask_path = mask_dir / f"{sample_id}.png"
        data.save_image(image_path, pixels)
        data.save_mask(mask_path, gt)
        entries.append(data.ManifestEntry(
            sample_id=sample_id,
            image_path=image_path,
            gt_mask_path=mask_path,
            boxes=data.boxes_from_mask(gt, merge_overlaps=True),
            split=split,
        ))
    manifest = data.DatasetManifest(entries)
    manifest.save(out_dir / "manifest.json")
    return manifest
