"""Training, checkpointing, and batch prediction for the segmentation
network.

Training is fully deterministic for a fixed config: model init, shuffle
order, and augmentation coins are all derived from the config seed, and
runs on CPU. Checkpoints use a custom single-file format (fixed magic,
JSON header with a payload checksum, raw little-endian tensor bytes in
sorted name order) so that identical runs produce byte-identical files;
archive formats with embedded timestamps would break that.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, load_image, load_mask, save_mask
from .errors import ChecksumError, ConfigError, DataError, NumericError
from .loss import total_loss
from .mgnet import MGNet, MGNetConfig, build_mgnet, seed_everything, upsample_to

CHECKPOINT_MAGIC = b"BSAMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization protocol knobs.

    Defaults follow the reference protocol (AdamW, lr 1e-4 decayed x0.1
    after epoch 50, weight decay 0.1, 100 epochs, batch 16, 480x480);
    all of them scale down for desk-size runs.
    """

    input_size: tuple = (480, 480)
    lr: float = 1e-4
    weight_decay: float = 0.1
    decay_factor: float = 0.1
    decay_at_epoch: int = 50
    epochs: int = 100
    batch_size: int = 16
    loss_window: int = 31
    seed: int = 0
    deterministic: bool = True
    hflip: bool = False
    max_steps: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        if len(self.input_size) != 2 or any(s % 32 or s < 32 for s in self.input_size):
            raise ConfigError(f"input_size: each side must be a positive "
                              f"multiple of 32, got {self.input_size}")
        for name in ("lr", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be > 0")
        for name in ("weight_decay", "max_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        for name in ("epochs", "batch_size", "decay_at_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.loss_window < 1 or self.loss_window % 2 == 0:
            raise ConfigError(f"loss_window: must be odd and positive, "
                              f"got {self.loss_window}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: base rate through decay_at_epoch,
    then base * decay_factor."""
    if epoch < 1:
        raise ConfigError(f"epoch is 1-based, got {epoch}")
    if epoch <= config.decay_at_epoch:
        return config.lr
    return config.lr * config.decay_factor


def _resize_image(pixels: np.ndarray, size) -> np.ndarray:
    """Bilinear-resize an HxWx3 float image to (H, W) via torch."""
    t = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
    t = upsample_to(t, size)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def _resize_mask_nearest(values: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbor mask resize; preserves binaryness exactly."""
    t = torch.from_numpy(values).unsqueeze(0).unsqueeze(0)
    if t.shape[-2:] != tuple(size):
        t = torch.nn.functional.interpolate(t, size=tuple(size), mode="nearest")
    return t.squeeze(0).squeeze(0).numpy()


def load_training_arrays(manifest: DatasetManifest, size, target: str = "auto"):
    """Load (images, masks) tensors for the manifest's train entries.

    target: "pseudo" trains on pseudo-labels, "gt" on ground truth,
    "auto" prefers pseudo-labels and falls back to ground truth.
    """
    if target not in ("auto", "pseudo", "gt"):
        raise ConfigError(f"unknown training target {target!r}")
    images, masks = [], []
    for entry in manifest.entries:
        if entry.split != "train":
            continue
        mask_path = entry.gt_mask_path if target == "gt" else entry.pseudo_label_path
        if mask_path is None and target == "auto":
            mask_path = entry.gt_mask_path
        if mask_path is None:
            raise DataError(f"{entry.sample_id}: no {target} mask to train on")
        pixels = load_image(entry.image_path).pixels
        values = load_mask(mask_path)
        if values.shape != pixels.shape[:2]:
            raise DataError(f"{entry.sample_id}: mask shape {values.shape} "
                            f"does not match image {pixels.shape[:2]}")
        images.append(_resize_image(pixels, size).transpose(2, 0, 1))
        masks.append(_resize_mask_nearest((values > 0.5).astype(np.float32), size))
    if not images:
        raise DataError("manifest has no train-split entries")
    x = torch.from_numpy(np.stack(images))
    y = torch.from_numpy(np.stack(masks)).unsqueeze(1)
    return x, y


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    model: MGNet
    records: list = field(default_factory=list)


def save_checkpoint(path, model: MGNet, step: int):
    """Write model weights in the deterministic single-file format."""
    path = Path(path)
    state = model.state_dict()
    arrays, payload = [], bytearray()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        arrays.append({"name": name, "dtype": str(arr.dtype),
                       "shape": list(arr.shape), "nbytes": len(raw)})
        payload.extend(raw)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "arrays": arrays,
        "sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "big"))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path, expect_config: MGNetConfig = None):
    """Read a checkpoint; returns (model, config, step).

    Verifies magic, format version, and the payload checksum; if
    expect_config is given, every architecture field must match.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int.from_bytes(blob[8:16], "big")
    meta = json.loads(blob[16:16 + header_len].decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version "
                        f"{meta.get('format_version')}")
    payload = blob[16 + header_len:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    config = MGNetConfig.from_dict(meta["config"])
    if expect_config is not None:
        saved, wanted = config.to_dict(), expect_config.to_dict()
        for key in wanted:
            if saved[key] != wanted[key]:
                raise ConfigError(f"checkpoint config mismatch at {key!r}: "
                                  f"saved {saved[key]!r}, expected {wanted[key]!r}")
    model = build_mgnet(config, seed=0)
    state, offset = {}, 0
    for spec in meta["arrays"]:
        raw = payload[offset:offset + spec["nbytes"]]
        offset += spec["nbytes"]
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
        state[spec["name"]] = torch.from_numpy(
            arr.reshape(spec["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, config, meta["step"]


def train(mgnet_config: MGNetConfig, train_config: TrainConfig,
          manifest: DatasetManifest, out_dir, target: str = "auto",
          checkpoint_name: str = "model.ckpt") -> TrainResult:
    """Train from scratch on the manifest's train split.

    Writes ``<out_dir>/<checkpoint_name>`` and a JSON-lines log
    ``train_log.jsonl`` with one record per step (epoch, lr, loss terms,
    wall-clock ms). A non-finite loss aborts with NumericError; the last
    periodic checkpoint stays on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = train_config.input_size
    if tuple(mgnet_config.input_size) != size:
        raise ConfigError(f"input_size mismatch: network {mgnet_config.input_size}, "
                          f"training {size}")
    x, y = load_training_arrays(manifest, size, target=target)

    model = build_mgnet(mgnet_config, seed=train_config.seed)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                                  weight_decay=train_config.weight_decay)

    ckpt_path = out_dir / checkpoint_name
    log_path = out_dir / "train_log.jsonl"
    records = []
    step = 0
    n = x.shape[0]
    done = False
    with open(log_path, "w") as log:
        for epoch in range(1, train_config.epochs + 1):
            rng = np.random.default_rng([train_config.seed, epoch])
            order = rng.permutation(n)
            flips = (rng.random(n) < 0.5) if train_config.hflip else np.zeros(n, bool)
            lr = lr_for_epoch(train_config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for start in range(0, n, train_config.batch_size):
                idx = order[start:start + train_config.batch_size]
                xb, yb = x[idx].clone(), y[idx].clone()
                flip = torch.from_numpy(flips[idx])
                if flip.any():
                    xb[flip] = torch.flip(xb[flip], dims=[-1])
                    yb[flip] = torch.flip(yb[flip], dims=[-1])
                t0 = time.perf_counter()
                optimizer.zero_grad()
                outputs = model(xb)
                loss = total_loss(outputs.as_tuple(), yb,
                                  window=train_config.loss_window)
                if not torch.isfinite(loss.total):
                    raise NumericError(f"non-finite loss at step {step + 1}; "
                                       f"last checkpoint kept at {ckpt_path}")
                loss.total.backward()
                optimizer.step()
                step += 1
                record = {"step": step, "epoch": epoch, "lr": lr,
                          "loss": loss.to_dict(),
                          "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
                records.append(record)
                log.write(json.dumps(record, sort_keys=True) + "\n")
                if train_config.checkpoint_every and \
                        step % train_config.checkpoint_every == 0:
                    save_checkpoint(ckpt_path, model, step)
                if train_config.max_steps and step >= train_config.max_steps:
                    done = True
                    break
            if done:
                break
    save_checkpoint(ckpt_path, model, step)
    model.eval()
    return TrainResult(ckpt_path, log_path, model, records)


def predict_array(model: MGNet, pixels: np.ndarray, input_size=None) -> np.ndarray:
    """Probability map for one HxWx3 image at its original resolution."""
    size = tuple(input_size) if input_size else model.config.input_size
    x = torch.from_numpy(_resize_image(pixels, size).transpose(2, 0, 1)).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        prob = torch.sigmoid(upsample_to(model(x).p1, pixels.shape[:2]))
    if was_training:
        model.train()
    return prob.squeeze(0).squeeze(0).numpy().astype(np.float32)


def predict(checkpoint_path, images, out_dir) -> list:
    """Run a checkpoint over images and save 8-bit probability PNGs.

    ``images`` is a DatasetManifest, a directory of PNGs, or a list of
    image paths. Returns the written paths (one per image, same stem).
    """
    model, config, _ = load_checkpoint(checkpoint_path)
    if isinstance(images, DatasetManifest):
        paths = [e.image_path for e in images.entries]
    else:
        images = Path(images) if isinstance(images, (str, Path)) else images
        if isinstance(images, Path):
            if not images.is_dir():
                raise DataError(f"image directory not found: {images}")
            paths = sorted(images.glob("*.png"))
            if not paths:
                raise DataError(f"no PNG images under {images}")
        else:
            paths = [Path(p) for p in images]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in paths:
        sample = load_image(path)
        prob = predict_array(model, sample.pixels, config.input_size)
        out_path = out_dir / f"{Path(path).stem}.png"
        save_mask(out_path, prob)
        written.append(out_path)
    return written
