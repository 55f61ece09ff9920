"""Box-supervised pseudo-labeling pipeline.

Phases: (1) a promptable segmenter turns per-image boxes into binary
pseudo-labels; (2) labels whose merged-box count disagrees with the
annotation count are flagged; (3) a first network is trained on the
consistent set; (4) it predicts the flagged images; (5) each flagged
label keeps only connected components that the prediction supports
(max probability over the component above tau), written back as refined
labels; (6) a final network is retrained from scratch on consistent
plus refined.

Segmenters are pluggable: OracleSegmenter derives labels from ground
truth with controllable corruption (for closed-loop experiments),
ExternalMaskLoader ingests masks produced offline by a real promptable
model.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from . import metrics as metrics_mod
from .data import (BBox, DatasetManifest, ImageSample, ManifestEntry,
                   connected_components, count_boxes, is_binary, load_image,
                   load_mask, save_mask)
from .errors import ConfigError, DataError
from .mgnet import MGNetConfig
from .synth import blob_shape
from .train import TrainConfig, predict_array, train

_PLACE_ATTEMPTS = 500

log = logging.getLogger("boxsam.pseudolabel")


class PromptableSegmenter:
    """Interface: binary mask from an image plus its box prompts."""

    def segment(self, image: ImageSample, boxes: list) -> np.ndarray:
        raise NotImplementedError

    def source_path(self, sample_id: str):
        """Existing mask file to reference instead of re-saving, if any."""
        return None


@dataclass
class NoiseSpec:
    """Controlled corruption for the oracle segmenter.

    extra_blob_count spurious background components per image (placed
    disjoint from all existing foreground), sized within
    blob_size_range; morph_jitter dilates/erodes the object mask by a
    random amount in [-j, j].
    """

    extra_blob_count: int = 0
    blob_size_range: tuple = (4, 10)
    morph_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        self.blob_size_range = tuple(int(v) for v in self.blob_size_range)
        if self.extra_blob_count < 0 or self.morph_jitter < 0:
            raise ConfigError("noise counts must be >= 0")
        lo, hi = self.blob_size_range
        if not 2 <= lo <= hi:
            raise ConfigError(f"blob_size_range must satisfy 2 <= lo <= hi, "
                              f"got {self.blob_size_range}")


def _place_disjoint_blob(rng, occupied: np.ndarray, size_range) -> np.ndarray | None:
    """A blob whose 1px-padded bounding box avoids existing foreground,
    or None when no spot is found."""
    h, w = occupied.shape
    for _ in range(_PLACE_ATTEMPTS):
        span = int(rng.integers(size_range[0], size_range[1] + 1))
        blob = blob_shape(rng, span)
        bh, bw = blob.shape
        if bh + 2 > h or bw + 2 > w:
            continue
        y = int(rng.integers(1, h - bh))
        x = int(rng.integers(1, w - bw))
        if occupied[y - 1:y + bh + 1, x - 1:x + bw + 1].any():
            continue
        out = np.zeros_like(occupied)
        out[y:y + bh, x:x + bw] = blob
        return out
    return None


class OracleSegmenter(PromptableSegmenter):
    """Ground-truth-backed segmenter with optional corruption.

    The clean output is GT restricted to the union of the prompt boxes.
    Corruption is a pure function of (noise.seed, sample_id).
    """

    def __init__(self, gt_paths: dict, noise: NoiseSpec | None = None):
        self.gt_paths = dict(gt_paths)
        self.noise = noise or NoiseSpec()

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest,
                      noise: NoiseSpec | None = None) -> "OracleSegmenter":
        paths = {}
        for entry in manifest.entries:
            if entry.gt_mask_path is None:
                raise DataError(f"{entry.sample_id}: oracle segmenter needs "
                                f"a ground-truth mask")
            paths[entry.sample_id] = entry.gt_mask_path
        return cls(paths, noise)

    def _rng(self, sample_id: str) -> np.random.Generator:
        return np.random.default_rng(
            [self.noise.seed, zlib.crc32(sample_id.encode())])

    def segment(self, image: ImageSample, boxes: list) -> np.ndarray:
        if image.id not in self.gt_paths:
            raise DataError(f"no ground truth registered for {image.id!r}")
        gt = load_mask(self.gt_paths[image.id]) > 0.5
        if gt.shape != image.pixels.shape[:2]:
            raise DataError(f"{image.id}: GT shape {gt.shape} does not match "
                            f"image {image.pixels.shape[:2]}")
        prompt = np.zeros_like(gt)
        for box in boxes:
            prompt[box.y_min:box.y_max, box.x_min:box.x_max] = True
        out = gt & prompt

        noise = self.noise
        if noise.morph_jitter or noise.extra_blob_count:
            rng = self._rng(image.id)
            if noise.morph_jitter:
                k = int(rng.integers(-noise.morph_jitter, noise.morph_jitter + 1))
                if k > 0:
                    out = ndi.binary_dilation(out, iterations=k)
                elif k < 0:
                    eroded = ndi.binary_erosion(out, iterations=-k)
                    if eroded.any():
                        out = eroded
            for _ in range(noise.extra_blob_count):
                blob = _place_disjoint_blob(rng, out, noise.blob_size_range)
                if blob is not None:
                    out = out | blob
        return out.astype(np.float32)


class ExternalMaskLoader(PromptableSegmenter):
    """Reads precomputed masks ``<dir>/<id>.png``; nonzero means
    foreground. Box prompts are assumed already consumed upstream."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DataError(f"external mask directory not found: {directory}")

    def source_path(self, sample_id: str):
        path = self.directory / f"{sample_id}.png"
        return path if path.exists() else None

    def segment(self, image: ImageSample, boxes: list) -> np.ndarray:
        path = self.directory / f"{image.id}.png"
        if not path.exists():
            raise DataError(f"no external mask for {image.id!r} at {path}")
        values = load_mask(path)
        if values.shape != image.pixels.shape[:2]:
            raise DataError(f"{image.id}: external mask shape {values.shape} "
                            f"does not match image {image.pixels.shape[:2]}")
        return (values > 0).astype(np.float32)


def generate_initial_pseudolabels(segmenter: PromptableSegmenter,
                                  manifest: DatasetManifest, out_dir,
                                  jobs: int = 1) -> DatasetManifest:
    """Segment every train entry; returns a manifest whose train entries
    carry pseudo_label_path.

    A train entry without boxes is an error. A segmenter failure on one
    sample is logged and that sample is excluded; the rest proceed. When
    the segmenter already owns a binary file for a sample it is
    referenced in place instead of re-encoded. Non-train entries pass
    through unchanged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(entry: ManifestEntry):
        if entry.split != "train":
            return entry
        if not entry.boxes:
            raise DataError(f"{entry.sample_id}: train entry has no boxes")
        image = load_image(entry.image_path, entry.sample_id)
        try:
            mask = segmenter.segment(image, entry.boxes)
            if mask.shape != image.pixels.shape[:2]:
                raise DataError(f"segmenter returned shape {mask.shape} for "
                                f"image {image.pixels.shape[:2]}")
            if not is_binary(mask):
                raise DataError("segmenter output not binary")
        except Exception as exc:
            log.warning("excluding %s: %s", entry.sample_id, exc)
            return None
        source = segmenter.source_path(entry.sample_id)
        if source is not None and is_binary(load_mask(source)):
            path = source
        else:
            path = out_dir / f"{entry.sample_id}.png"
            save_mask(path, mask)
        return replace(entry, pseudo_label_path=path)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(process, manifest.entries))
    else:
        entries = [process(e) for e in manifest.entries]
    return DatasetManifest([e for e in entries if e is not None])


def partition_by_box_count(manifest: DatasetManifest):
    """Split train entries by whether the pseudo-label's merged-box count
    equals the annotation box count.

    Returns (consistent, flagged); flagged entries get split="flagged".
    Together they contain exactly the train entries of the input.
    """
    consistent, flagged = [], []
    for entry in manifest.entries:
        if entry.split != "train":
            continue
        if entry.pseudo_label_path is None:
            raise DataError(f"{entry.sample_id}: no pseudo-label to partition on")
        pseudo = load_mask(entry.pseudo_label_path) > 0.5
        if count_boxes(pseudo) == len(entry.boxes):
            consistent.append(entry)
        else:
            flagged.append(replace(entry, split="flagged"))
    return DatasetManifest(consistent), DatasetManifest(flagged)


@dataclass
class RpsReport:
    """Outcome of refining one flagged pseudo-label."""

    sample_id: str
    components_total: int
    components_kept: int
    components_removed: int
    box_count_annotation: int | None = None
    box_count_pseudo: int | None = None
    matched: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def redundancy_process(flagged_label, prediction, tau: float = 0.0,
                       connectivity: int = 8, sample_id: str = ""):
    """Keep each connected component of the flagged label only if the
    prediction exceeds tau somewhere inside it; otherwise zero the whole
    component. Returns (refined binary mask, RpsReport).
    """
    label = np.asarray(flagged_label)
    pred = np.asarray(prediction, dtype=np.float64)
    if label.shape != pred.shape:
        raise DataError(f"label/prediction shape mismatch: {label.shape} "
                        f"vs {pred.shape}")
    if not is_binary(label):
        raise DataError("flagged label must be binary")
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"tau must lie in [0, 1), got {tau}")
    labeling = connected_components(label, connectivity)
    refined = np.zeros(label.shape, dtype=np.float32)
    kept = 0
    if labeling.count:
        maxima = ndi.maximum(pred, labels=labeling.labels,
                             index=np.arange(1, labeling.count + 1))
        maxima = np.atleast_1d(maxima)
        for comp, peak in enumerate(maxima, start=1):
            if peak > tau:
                refined[labeling.labels == comp] = 1.0
                kept += 1
    report = RpsReport(sample_id, labeling.count, kept, labeling.count - kept)
    return refined, report


@dataclass
class SegmenterSpec:
    """Which segmenter the pipeline builds: "oracle" (+noise) or
    "external" (+directory of mask files)."""

    kind: str = "oracle"
    directory: str | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        if self.kind not in ("oracle", "external"):
            raise ConfigError(f"unknown segmenter kind {self.kind!r}")
        if self.kind == "external" and not self.directory:
            raise ConfigError("external segmenter needs 'directory'")

    def build(self, manifest: DatasetManifest) -> PromptableSegmenter:
        if self.kind == "oracle":
            return OracleSegmenter.from_manifest(manifest, self.noise)
        return ExternalMaskLoader(self.directory)


@dataclass
class RpsSpec:
    tau: float = 0.0
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"rps.tau must lie in [0, 1), got {self.tau}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"rps.connectivity must be 4 or 8, "
                              f"got {self.connectivity}")


@dataclass
class PipelineConfig:
    manifest: str
    out_dir: str
    segmenter: SegmenterSpec = field(default_factory=SegmenterSpec)
    rps: RpsSpec = field(default_factory=RpsSpec)
    mgnet: MGNetConfig = field(default_factory=MGNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    jobs: int = 1

    def __post_init__(self):
        for name, cls in (("segmenter", SegmenterSpec), ("rps", RpsSpec),
                          ("mgnet", MGNetConfig), ("train", TrainConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value) if name in ("segmenter", "rps")
                        else cls.from_dict(value))
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown pipeline config fields: {sorted(extra)}")
        missing = {"manifest", "out_dir"} - set(d)
        if missing:
            raise ConfigError(f"pipeline config lacks fields: {sorted(missing)}")
        return cls(**d)


@dataclass
class PipelineResult:
    final_manifest: DatasetManifest
    final_manifest_path: Path
    initial_checkpoint: Path
    final_checkpoint: Path
    rps_reports: list
    metrics: dict
    timings: dict


def _evaluate_model(model_ckpt, entries, input_size):
    """Mean metrics of a checkpoint over entries that have ground truth."""
    from .train import load_checkpoint
    model, config, _ = load_checkpoint(model_ckpt)
    pairs = []
    for entry in entries:
        if entry.gt_mask_path is None:
            continue
        sample = load_image(entry.image_path, entry.sample_id)
        prob = predict_array(model, sample.pixels, config.input_size)
        pairs.append((entry.sample_id, prob, load_mask(entry.gt_mask_path) > 0.5))
    if not pairs:
        return None
    return metrics_mod.evaluate_pairs(pairs).means


def run_boxsam(config: PipelineConfig, predict_fn=None) -> PipelineResult:
    """Run the six pipeline phases end to end.

    predict_fn(entry) -> probability map at native resolution replaces
    the trained initial model in phase 4 when given (useful for
    closed-loop tests). All artifacts land under config.out_dir; the
    phase timing file is the only run-dependent output.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(config.manifest)
    timings, t_start = {}, time.perf_counter()

    def tick(phase):
        nonlocal t_start
        now = time.perf_counter()
        timings[phase] = round(now - t_start, 3)
        t_start = now

    segmenter = config.segmenter.build(manifest)
    labeled = generate_initial_pseudolabels(segmenter, manifest,
                                            out_dir / "pseudolabels",
                                            jobs=config.jobs)
    tick("pseudolabels")

    consistent, flagged = partition_by_box_count(labeled)
    if not consistent.entries:
        raise DataError("partition left no consistent samples to train on")
    (out_dir / "partition").mkdir(exist_ok=True)
    consistent.save(out_dir / "partition" / "consistent.json")
    flagged.save(out_dir / "partition" / "flagged.json")
    tick("partition")

    initial = train(config.mgnet, config.train, consistent,
                    out_dir / "checkpoints" / "initial")
    tick("train_initial")

    rps_reports = []
    refined_entries = []
    if flagged.entries:
        pred_dir = out_dir / "predictions"
        pred_dir.mkdir(exist_ok=True)
        refined_dir = out_dir / "refined"
        refined_dir.mkdir(exist_ok=True)
        for entry in flagged.entries:
            if predict_fn is not None:
                prob = np.asarray(predict_fn(entry), dtype=np.float32)
            else:
                sample = load_image(entry.image_path, entry.sample_id)
                prob = predict_array(initial.model, sample.pixels,
                                     config.mgnet.input_size)
            save_mask(pred_dir / f"{entry.sample_id}.png", prob)
        tick("predict_flagged")

        def refine(entry: ManifestEntry):
            pseudo = (load_mask(entry.pseudo_label_path) > 0.5).astype(np.float32)
            pred = load_mask(pred_dir / f"{entry.sample_id}.png")
            refined, report = redundancy_process(
                pseudo, pred, tau=config.rps.tau,
                connectivity=config.rps.connectivity,
                sample_id=entry.sample_id)
            report.box_count_annotation = len(entry.boxes)
            report.box_count_pseudo = count_boxes(pseudo)
            report.matched = count_boxes(refined) == len(entry.boxes)
            path = refined_dir / f"{entry.sample_id}.png"
            save_mask(path, refined)
            return replace(entry, pseudo_label_path=path, split="train"), report

        if config.jobs > 1:
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                results = list(pool.map(refine, flagged.entries))
        else:
            results = [refine(e) for e in flagged.entries]
        for refined_entry, report in results:
            refined_entries.append(refined_entry)
            rps_reports.append(report)
        rps_reports.sort(key=lambda r: r.sample_id)
        tick("rps")

    report_doc = {"tau": config.rps.tau,
                  "connectivity": config.rps.connectivity,
                  "samples": [r.to_dict() for r in rps_reports]}
    (out_dir / "rps_report.json").write_text(
        json.dumps(report_doc, indent=2, sort_keys=True) + "\n")

    retrain_entries = list(consistent.entries) + refined_entries
    passthrough = [e for e in labeled.entries if e.split not in ("train", "flagged")]
    final_manifest = DatasetManifest(retrain_entries + passthrough)
    final_path = out_dir / "manifest_final.json"
    final_manifest.save(final_path)

    if refined_entries:
        final = train(config.mgnet, config.train,
                      DatasetManifest(retrain_entries),
                      out_dir / "checkpoints" / "final")
        final_ckpt = final.checkpoint_path
    else:
        # No refined labels: the retrain set is the phase-3 set and training
        # is deterministic, so the final model equals the initial one.
        final_ckpt = out_dir / "checkpoints" / "final" / "model.ckpt"
        final_ckpt.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(initial.checkpoint_path, final_ckpt)
        shutil.copyfile(initial.log_path, final_ckpt.parent / "train_log.jsonl")
    tick("train_final")

    eval_entries = retrain_entries
    metric_doc = {
        "initial": _evaluate_model(initial.checkpoint_path, eval_entries,
                                   config.mgnet.input_size),
        "final": _evaluate_model(final_ckpt, eval_entries,
                                 config.mgnet.input_size),
    }
    (out_dir / "metrics_report.json").write_text(
        json.dumps(metric_doc, indent=2, sort_keys=True) + "\n")
    tick("evaluate")

    (out_dir / "timings.json").write_text(
        json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return PipelineResult(final_manifest, final_path, initial.checkpoint_path,
                          final_ckpt, rps_reports, metric_doc, timings)
