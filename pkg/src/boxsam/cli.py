"""Command-line entry point.

Subcommands mirror the pipeline phases: synth, boxes, pseudo, partition,
rps, train, predict, eval, boxsam (end to end), report. Options can come
from a JSON/YAML config file (--config); explicit flags win over file
values, which win over defaults. The BOXSAM_SEED environment variable
overrides every seed. Exit codes: 0 success, 2 configuration/usage
errors, 3 data errors, 4 numeric or unexpected failures.

Each command refuses to write into an existing non-empty output unless
--force is given, and ends by printing a single-line JSON summary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import DatasetManifest, boxes_from_mask, load_mask, save_mask
from .errors import ConfigError, DataError, NumericError
from .mgnet import MGNetConfig
from .metrics import evaluate_dirs
from .pseudolabel import (NoiseSpec, PipelineConfig, RpsSpec, SegmenterSpec,
                          generate_initial_pseudolabels, partition_by_box_count,
                          redundancy_process, run_boxsam)
from .synth import SynthConfig, generate
from .train import TrainConfig, predict, train


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}")
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return doc


def _merge(defaults: dict, file_values: dict, args, keys) -> dict:
    """defaults < config file < explicit flags (argparse default None)."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(file_values)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _seed_override() -> int | None:
    raw = os.environ.get("BOXSAM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"BOXSAM_SEED must be an integer, got {raw!r}")


def _ensure_out(path, force: bool) -> Path:
    """Create an output directory, refusing to reuse a non-empty one."""
    path = Path(path)
    if path.is_file():
        raise ConfigError(f"output path {path} is a file")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty "
                          f"(use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ensure_out_file(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"output file {path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _summary(command: str, **fields):
    doc = {"command": command, "status": "ok"}
    doc.update(fields)
    print(json.dumps(doc, sort_keys=True))


def _cmd_synth(args) -> int:
    file_values = _load_config_file(args.config) if args.config else {}
    defaults = {"count": 16, "size": [96, 96], "objects": [1, 2],
                "contrast": 0.5, "blob_scale": [12, 24], "seed": 0,
                "split": "train"}
    opts = _merge(defaults, file_values, args,
                  ("count", "size", "objects", "contrast", "blob_scale",
                   "seed", "split"))
    seed = _seed_override()
    if seed is not None:
        opts["seed"] = seed
    out = _ensure_out(args.out, args.force)
    config = SynthConfig(count=opts["count"], size=tuple(opts["size"]),
                         objects_per_image=tuple(opts["objects"]),
                         contrast=opts["contrast"],
                         blob_scale=tuple(opts["blob_scale"]),
                         seed=opts["seed"])
    generate(config, out, split=opts["split"])
    _summary("synth", out=str(out), count=opts["count"],
             manifest=str(out / "manifest.json"))
    return 0


def _cmd_boxes(args) -> int:
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise DataError(f"mask directory not found: {masks_dir}")
    paths = sorted(masks_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG masks under {masks_dir}")
    merge = not args.no_merge
    doc = {}
    for path in paths:
        mask = load_mask(path) > 0.5
        boxes = boxes_from_mask(mask, merge_overlaps=merge,
                                connectivity=args.connectivity)
        doc[path.stem] = [b.as_list() for b in boxes]
    out = _ensure_out_file(args.out, args.force)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _summary("boxes", out=str(out), images=len(doc),
             boxes=sum(len(v) for v in doc.values()))
    return 0


def _cmd_pseudo(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    out = _ensure_out(args.out, args.force)
    seed = _seed_override()
    noise = NoiseSpec(extra_blob_count=args.noise_blobs,
                      blob_size_range=tuple(args.noise_size),
                      morph_jitter=args.noise_jitter,
                      seed=seed if seed is not None else args.noise_seed)
    spec = SegmenterSpec(kind=args.segmenter, directory=args.external_dir,
                         noise=noise)
    labeled = generate_initial_pseudolabels(spec.build(manifest), manifest,
                                            out / "pseudolabels", jobs=args.jobs)
    manifest_path = out / "manifest_pseudo.json"
    labeled.save(manifest_path)
    n = sum(1 for e in labeled.entries if e.pseudo_label_path is not None)
    _summary("pseudo", manifest=str(manifest_path), labeled=n)
    return 0


def _cmd_partition(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    out = _ensure_out(args.out, args.force)
    consistent, flagged = partition_by_box_count(manifest)
    consistent.save(out / "consistent.json")
    flagged.save(out / "flagged.json")
    _summary("partition", consistent=len(consistent), flagged=len(flagged),
             out=str(out))
    return 0


def _cmd_rps(args) -> int:
    labels_dir, preds_dir = Path(args.labels), Path(args.preds)
    if not labels_dir.is_dir():
        raise DataError(f"label directory not found: {labels_dir}")
    paths = sorted(labels_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG labels under {labels_dir}")
    out = _ensure_out(args.out, args.force)
    refined_dir = out / "refined"
    refined_dir.mkdir(exist_ok=True)
    reports = []
    for path in paths:
        pred_path = preds_dir / path.name
        if not pred_path.exists():
            raise DataError(f"no prediction for label {path.name}")
        label = (load_mask(path) > 0.5).astype("float32")
        refined, report = redundancy_process(label, load_mask(pred_path),
                                             tau=args.tau,
                                             connectivity=args.connectivity,
                                             sample_id=path.stem)
        save_mask(refined_dir / path.name, refined)
        reports.append(report)
    doc = {"tau": args.tau, "connectivity": args.connectivity,
           "samples": [r.to_dict() for r in reports]}
    (out / "rps_report.json").write_text(json.dumps(doc, indent=2,
                                                    sort_keys=True) + "\n")
    _summary("rps", refined=len(reports),
             components_kept=sum(r.components_kept for r in reports),
             components_removed=sum(r.components_removed for r in reports),
             report=str(out / "rps_report.json"))
    return 0


_TRAIN_DEFAULTS = {
    "input_size": [480, 480], "lr": 1e-4, "weight_decay": 0.1,
    "decay_factor": 0.1, "decay_at_epoch": 50, "epochs": 100,
    "batch_size": 16, "loss_window": 31, "seed": 0, "deterministic": True,
    "hflip": False, "max_steps": 0, "checkpoint_every": 0,
}
_MGNET_DEFAULTS = {
    "encoder": "tiny", "encoder_channels": [16, 32, 64, 128],
    "encoder_depth": 1, "width": 64, "use_cmd": True, "use_cem": True,
    "use_mfam": True, "deterministic": True,
}


def _train_configs(args):
    file_values = _load_config_file(args.config) if args.config else {}
    extra = set(file_values) - {"train", "mgnet", "target"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    train_opts = _merge(_TRAIN_DEFAULTS, file_values.get("train", {}), args,
                        ("input_size", "lr", "weight_decay", "decay_factor",
                         "decay_at_epoch", "epochs", "batch_size",
                         "loss_window", "seed", "max_steps",
                         "checkpoint_every"))
    if args.hflip:
        train_opts["hflip"] = True
    mgnet_opts = _merge(_MGNET_DEFAULTS, file_values.get("mgnet", {}), args,
                        ("encoder_channels", "encoder_depth", "width"))
    for flag, key in (("no_cmd", "use_cmd"), ("no_cem", "use_cem"),
                      ("no_mfam", "use_mfam")):
        if getattr(args, flag):
            mgnet_opts[key] = False
    seed = _seed_override()
    if seed is not None:
        train_opts["seed"] = seed
    mgnet_opts["input_size"] = train_opts["input_size"]
    target = args.target or file_values.get("target", "auto")
    return (MGNetConfig.from_dict(mgnet_opts),
            TrainConfig.from_dict(train_opts), target)


def _cmd_train(args) -> int:
    mgnet_config, train_config, target = _train_configs(args)
    manifest = DatasetManifest.load(args.manifest)
    out = _ensure_out(args.out, args.force)
    result = train(mgnet_config, train_config, manifest, out, target=target)
    last = result.records[-1] if result.records else None
    _summary("train", checkpoint=str(result.checkpoint_path),
             log=str(result.log_path), steps=len(result.records),
             final_loss=last["loss"]["total"] if last else None)
    return 0


def _cmd_predict(args) -> int:
    out = _ensure_out(args.out, args.force)
    images = args.images
    if str(images).endswith(".json"):
        images = DatasetManifest.load(images)
    written = predict(args.checkpoint, images, out)
    _summary("predict", out=str(out), written=len(written))
    return 0


def _cmd_eval(args) -> int:
    report = evaluate_dirs(args.preds, args.gts)
    print(report.table())
    m = report.means
    f_text = "n/a" if m["f_adaptive"] is None else f"{m['f_adaptive']:.3f}"
    print(f"mean S={m['s_alpha']:.3f} F={f_text} "
          f"MAE={m['mae']:.3f} E={m['e_phi']:.3f}")
    if args.out:
        out = _ensure_out_file(args.out, args.force)
        out.write_text(json.dumps(report.to_dict(), indent=2,
                                  sort_keys=True) + "\n")
    _summary("eval", images=report.count, skipped=len(report.skipped),
             **{k: m[k] for k in ("mae", "s_alpha", "e_phi")})
    return 0


def _cmd_boxsam(args) -> int:
    doc = _load_config_file(args.config)
    if args.manifest:
        doc["manifest"] = args.manifest
    if args.out:
        doc["out_dir"] = args.out
    if args.jobs is not None:
        doc["jobs"] = args.jobs
    seed = _seed_override()
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
        doc.setdefault("segmenter", {}).setdefault("noise", {})["seed"] = seed
    if "out_dir" not in doc:
        raise ConfigError("pipeline config lacks fields: ['out_dir']")
    _ensure_out(doc["out_dir"], args.force)
    config = PipelineConfig.from_dict(doc)
    result = run_boxsam(config)
    _summary("boxsam", out=str(config.out_dir),
             initial_checkpoint=str(result.initial_checkpoint),
             final_checkpoint=str(result.final_checkpoint),
             flagged=len(result.rps_reports),
             manifest=str(result.final_manifest_path))
    return 0


def _render_report(doc) -> str:
    if isinstance(doc, dict) and "samples" in doc:
        header = (f"{'sample':<20} {'total':>6} {'kept':>6} {'removed':>8} "
                  f"{'ann':>4} {'pseudo':>7} {'matched':>8}")
        lines = [header, "-" * len(header)]
        for row in doc["samples"]:
            lines.append(f"{row['sample_id']:<20} {row['components_total']:>6} "
                         f"{row['components_kept']:>6} {row['components_removed']:>8} "
                         f"{str(row['box_count_annotation']):>4} "
                         f"{str(row['box_count_pseudo']):>7} "
                         f"{str(row['matched']):>8}")
        return "\n".join(lines)
    if isinstance(doc, dict) and "initial" in doc and "final" in doc:
        names = ("mae", "f_adaptive", "s_alpha", "e_phi", "dice", "iou")
        header = f"{'model':<10}" + "".join(f"{n:>11}" for n in names)
        lines = [header, "-" * len(header)]
        for key in ("initial", "final"):
            means = doc[key]
            if means is None:
                lines.append(f"{key:<10}{'(no ground truth)':>11}")
                continue
            cells = "".join(
                f"{means[n]:>11.4f}" if means.get(n) is not None else f"{'n/a':>11}"
                for n in names)
            lines.append(f"{key:<10}{cells}")
        return "\n".join(lines)
    raise DataError("unrecognized report document")


def _cmd_report(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"report file not found: {path}")
    if path.suffix == ".jsonl":
        records = [json.loads(line) for line in path.read_text().splitlines()
                   if line.strip()]
        if not records:
            raise DataError(f"empty training log {path}")
        first, last = records[0], records[-1]
        print(f"steps: {len(records)}  epochs: {last['epoch']}")
        print(f"loss: first={first['loss']['total']:.4f} "
              f"last={last['loss']['total']:.4f} "
              f"min={min(r['loss']['total'] for r in records):.4f}")
        _summary("report", kind="train-log", steps=len(records),
                 final_loss=last["loss"]["total"])
        return 0
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}")
    print(_render_report(doc))
    kind = "rps" if "samples" in doc else "metrics"
    _summary("report", kind=kind)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxsam",
        description="Box-supervised segmentation pipeline: pseudo-labels, "
                    "consistency partition, redundancy refinement, training, "
                    "evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", "generate a synthetic camouflage dataset", _cmd_synth)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON/YAML config file")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--objects", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--contrast", type=float)
    p.add_argument("--blob-scale", dest="blob_scale", type=int, nargs=2,
                   metavar=("LO", "HI"))
    p.add_argument("--seed", type=int)
    p.add_argument("--split")
    p.add_argument("--force", action="store_true")

    p = add("boxes", "extract annotation boxes from binary masks", _cmd_boxes)
    p.add_argument("--masks", required=True, help="directory of mask PNGs")
    p.add_argument("--out", required=True, help="output boxes JSON file")
    p.add_argument("--no-merge", action="store_true",
                   help="keep one box per component instead of merging overlaps")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--force", action="store_true")

    p = add("pseudo", "generate pseudo-labels from box prompts", _cmd_pseudo)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segmenter", choices=("oracle", "external"),
                   default="oracle")
    p.add_argument("--external-dir", dest="external_dir")
    p.add_argument("--noise-blobs", dest="noise_blobs", type=int, default=0)
    p.add_argument("--noise-size", dest="noise_size", type=int, nargs=2,
                   default=(4, 10), metavar=("LO", "HI"))
    p.add_argument("--noise-jitter", dest="noise_jitter", type=int, default=0)
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")

    p = add("partition", "split by box-count consistency", _cmd_partition)
    p.add_argument("--manifest", required=True,
                   help="manifest with pseudo-label paths")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("rps", "refine flagged labels against predictions", _cmd_rps)
    p.add_argument("--labels", required=True, help="flagged label PNG dir")
    p.add_argument("--preds", required=True, help="prediction PNG dir")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")

    p = add("train", "train the segmentation network", _cmd_train)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON/YAML with train/mgnet sections")
    p.add_argument("--target", choices=("auto", "pseudo", "gt"))
    p.add_argument("--input-size", dest="input_size", type=int, nargs=2,
                   metavar=("H", "W"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--decay-at-epoch", dest="decay_at_epoch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--loss-window", dest="loss_window", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hflip", action="store_true")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--encoder-channels", dest="encoder_channels", type=int,
                   nargs=4, metavar=("C1", "C2", "C3", "C4"))
    p.add_argument("--encoder-depth", dest="encoder_depth", type=int)
    p.add_argument("--no-cmd", dest="no_cmd", action="store_true",
                   help="disable the cascaded guidance decoder")
    p.add_argument("--no-cem", dest="no_cem", action="store_true",
                   help="disable the dilated context blocks")
    p.add_argument("--no-mfam", dest="no_mfam", action="store_true",
                   help="disable mask-guided aggregation")
    p.add_argument("--force", action="store_true")

    p = add("predict", "run a checkpoint over images", _cmd_predict)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True,
                   help="image directory or manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("eval", "score predictions against ground truth", _cmd_eval)
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", help="optional JSON report file")
    p.add_argument("--force", action="store_true")

    p = add("boxsam", "run the full pipeline from a config file", _cmd_boxsam)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="override the config's manifest path")
    p.add_argument("--out", help="override the config's out_dir")
    p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true")

    p = add("report", "render a report file as a table", _cmd_report)
    p.add_argument("--input", required=True,
                   help="rps/metrics report JSON or train log JSONL")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # keep the contract: unexpected -> 4
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
