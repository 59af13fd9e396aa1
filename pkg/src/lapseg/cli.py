"""Command-line entry points: prepare, train, evaluate, predict, bench, compare.

Configuration is a flat JSON file (see DEFAULT_RUN_CONFIG for the schema and
defaults); command-line flags override file values, and the fully-resolved
config is echoed into the run directory. Exit codes are stable for
scripting: 0 success, 2 usage/precondition error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

import cv2
import numpy as np
import torch

from . import __version__
from .bench import BenchProtocol, fps_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .data import read_manifest_csv, scan_dataset, split_manifest, write_manifest_csv
from .errors import (BadRatios, ConfigHashMismatch, EmptyDataset, EmptyList,
                     LapsegError, MissingMask, UnreadableImage, WeightsUnavailable)
from .metrics import format_markdown_table, write_report_csv, write_report_json
from .model import (DEFAULT_ASPP_RATES, DEFAULT_DECODER_CHANNELS,
                    DecoderBlockSpec, EncoderSpec, ModelConfig, build_model)
from .training import TrainConfig, seed_everything, train, validate
from .transforms import ALL_AUGMENTATIONS, AugmentationConfig, imread_rgb, resize_image

logger = logging.getLogger(__name__)

OVERLAY_TINT = (0.0, 1.0, 0.0)  # RGB tint blended over instrument pixels
OVERLAY_ALPHA = 0.5

DEFAULT_RUN_CONFIG = {
    # model
    "backbone_a": "backbone_a",
    "backbone_b": "backbone_b",
    "pretrained": True,
    "frozen_encoders": False,
    "width_multiplier": 1.0,
    "se_reduction": 16,
    "decoder_channels": list(DEFAULT_DECODER_CHANNELS),
    "input_width": 512,
    "input_height": 256,
    # training
    "batch_size": 12,
    "optimizer": "sgd",
    "learning_rate": 1e-4,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "epochs": 100,
    "seed": 0,
    "lr_schedule": "constant",
    "device": "cpu",
    # augmentation
    "augment": True,
    "aug_ops": list(ALL_AUGMENTATIONS),
    "aug_probability": 0.5,
    "crop_fraction_lo": 0.7,
    "crop_fraction_hi": 1.0,
    "scale_lo": 0.75,
    "scale_hi": 1.25,
    "cutout_size_fraction": 0.25,
}

PRECONDITION_ERRORS = (BadRatios, EmptyDataset, EmptyList, MissingMask,
                       WeightsUnavailable, FileNotFoundError, ValueError)


def parse_size(text):
    try:
        width, height = (int(v) for v in text.lower().split("x"))
        return width, height
    except Exception:
        raise ValueError(f"expected WIDTHxHEIGHT, got {text!r}")


def parse_ratios(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise BadRatios(f"expected three comma-separated ratios, got {text!r}")
    return tuple(parts)


def resolve_run_config(args):
    """defaults <- config file <- explicit flags, in increasing precedence."""
    run = dict(DEFAULT_RUN_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(DEFAULT_RUN_CONFIG)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        run.update(file_values)

    flag_map = {
        "backbone_a": "backbone_a", "backbone_b": "backbone_b",
        "pretrained": "pretrained", "width_multiplier": "width_multiplier",
        "se_reduction": "se_reduction", "batch_size": "batch_size",
        "optimizer": "optimizer", "learning_rate": "learning_rate",
        "momentum": "momentum", "weight_decay": "weight_decay",
        "epochs": "epochs", "seed": "seed", "lr_schedule": "lr_schedule",
        "device": "device", "aug_probability": "aug_probability",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            run[key] = value
    if getattr(args, "input_size", None) is not None:
        run["input_width"], run["input_height"] = parse_size(args.input_size)
    if getattr(args, "no_augment", False):
        run["augment"] = False
    return run


def model_config_from_run(run):
    blocks = tuple(
        DecoderBlockSpec(out_channels=c, aspp_dilation_rates=r,
                         se_reduction=run["se_reduction"])
        for c, r in zip(run["decoder_channels"], DEFAULT_ASPP_RATES))
    return ModelConfig(
        encoder_a=EncoderSpec(run["backbone_a"], pretrained=run["pretrained"],
                              frozen=run["frozen_encoders"]),
        encoder_b=EncoderSpec(run["backbone_b"], pretrained=run["pretrained"],
                              frozen=run["frozen_encoders"]),
        decoder_blocks=blocks,
        input_size=(run["input_width"], run["input_height"]),
        width_multiplier=run["width_multiplier"],
    )


def train_config_from_run(run):
    return TrainConfig(
        batch_size=run["batch_size"], optimizer=run["optimizer"],
        learning_rate=run["learning_rate"], momentum=run["momentum"],
        weight_decay=run["weight_decay"], epochs=run["epochs"],
        seed=run["seed"], lr_schedule=run["lr_schedule"], device=run["device"])


def aug_config_from_run(run):
    if not run["augment"]:
        return None
    return AugmentationConfig(
        enabled=tuple(run["aug_ops"]), probability=run["aug_probability"],
        crop_fraction_range=(run["crop_fraction_lo"], run["crop_fraction_hi"]),
        scale_range=(run["scale_lo"], run["scale_hi"]),
        cutout_size_fraction=run["cutout_size_fraction"], seed=run["seed"])


def cmd_prepare(args):
    manifest = scan_dataset(args.root, layout=args.layout)
    parts = split_manifest(manifest, ratios=parse_ratios(args.ratios), seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest_csv(part, os.path.join(args.out, f"{name}.csv"))
    print(f"train={len(parts[0])} val={len(parts[1])} test={len(parts[2])}")
    return 0


def cmd_train(args):
    run = resolve_run_config(args)
    seed_everything(run["seed"])
    train_manifest = read_manifest_csv(args.train_manifest)
    val_manifest = read_manifest_csv(args.val_manifest)
    model = build_model(model_config_from_run(run))

    os.makedirs(args.run_dir, exist_ok=True)
    with open(os.path.join(args.run_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")

    model, log, best = train(
        model, train_manifest, val_manifest, train_config_from_run(run),
        aug_config=aug_config_from_run(run), run_dir=args.run_dir,
        resume_from=args.resume_from, num_workers=args.num_workers)

    final_train = validate(model, train_manifest, device=run["device"])
    print(f"final train dice={final_train.dice:.6f}")
    if best is not None:
        print(f"best val dice={best.val_dice:.6f} at epoch {best.epoch} ({best.path})")
    return 0


def _warn_on_flag_mismatch(args, sidecar):
    config = sidecar["model_config"]
    if getattr(args, "input_size", None) is not None:
        if list(parse_size(args.input_size)) != list(config["input_size"]):
            warnings.warn(
                f"--input-size {args.input_size} differs from checkpoint config "
                f"{tuple(config['input_size'])}; the checkpoint config wins",
                ConfigHashMismatch)


def cmd_evaluate(args):
    model, _payload, sidecar = load_checkpoint(args.checkpoint, map_location=args.device)
    _warn_on_flag_mismatch(args, sidecar)
    manifest = read_manifest_csv(args.manifest)
    report = validate(model, manifest, device=args.device)
    method = args.method or os.path.splitext(os.path.basename(args.checkpoint))[0]
    print(f"method={method} dice={report.dice:.6f} miou={report.miou:.6f} "
          f"recall={report.recall:.6f} precision={report.precision:.6f} "
          f"f2={report.f2:.6f} accuracy={report.accuracy:.6f} n_frames={report.n_frames}")
    if args.out_json:
        write_report_json(report, args.out_json)
    if args.out_csv:
        write_report_csv([(method, report)], args.out_csv)
    return 0


def _predict_frame(model, path, threshold=0.5):
    image = imread_rgb(path)
    native_h, native_w = image.shape[:2]
    width, height = model.config.input_size
    batch = torch.from_numpy(resize_image(image, (width, height))).permute(2, 0, 1)[None]
    with torch.no_grad():
        probs = model(batch)[0, 0].numpy()
    mask = (probs >= threshold).astype(np.uint8)
    if (native_h, native_w) != mask.shape:
        mask = cv2.resize(mask, (native_w, native_h), interpolation=cv2.INTER_NEAREST)
    return image, mask


def _write_overlay(image, mask, path):
    tint = np.array(OVERLAY_TINT, dtype=np.float32)
    blended = image.copy()
    blended[mask > 0] = (1 - OVERLAY_ALPHA) * image[mask > 0] + OVERLAY_ALPHA * tint
    bgr = cv2.cvtColor((blended * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
    cv2.imwrite(path, bgr)


def cmd_predict(args):
    model, _payload, _sidecar = load_checkpoint(args.checkpoint, map_location=args.device)
    if os.path.isdir(args.input):
        names = sorted(os.listdir(args.input))
        inputs = [os.path.join(args.input, n) for n in names
                  if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))]
    else:
        inputs = [args.input]
    if not inputs:
        raise EmptyDataset(f"no input images under {args.input}")
    os.makedirs(args.out, exist_ok=True)

    failures = 0
    for path in inputs:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            image, mask = _predict_frame(model, path)
        except (UnreadableImage, OSError) as exc:
            print(f"FAILED {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        mask_path = os.path.join(args.out, f"{stem}_mask.png")
        cv2.imwrite(mask_path, mask * 255)
        if args.overlay:
            _write_overlay(image, mask, os.path.join(args.out, f"{stem}_overlay.png"))
        print(f"wrote {mask_path}")
    return 1 if failures else 0


def _protocol_from_args(args):
    return BenchProtocol(
        batch_size=args.batch_size or 1,
        warmup_iters=args.warmup_iters,
        timed_iters=args.timed_iters,
        input_size=parse_size(args.input_size) if args.input_size else (512, 256),
        statistic=args.statistic)


def cmd_bench(args):
    model, _payload, _sidecar = load_checkpoint(args.checkpoint, map_location=args.device)
    protocol = _protocol_from_args(args)
    result = fps_benchmark(model, protocol, device=args.device)
    print(f"fps={result.fps:.4f} median={result.median_latency_s * 1e3:.3f}ms "
          f"mean={result.mean_latency_s * 1e3:.3f}ms "
          f"std={result.std_latency_s * 1e3:.3f}ms "
          f"({protocol.timed_iters} iters, batch {protocol.batch_size})")
    if args.out_csv:
        new = not os.path.exists(args.out_csv)
        with open(args.out_csv, "a", encoding="utf-8") as fh:
            if new:
                fh.write("checkpoint,fps,median_ms,mean_ms,std_ms\n")
            fh.write(f"{args.checkpoint},{result.fps!r},{result.median_latency_s * 1e3!r},"
                     f"{result.mean_latency_s * 1e3!r},{result.std_latency_s * 1e3!r}\n")
    return 0


def cmd_compare(args):
    manifest = read_manifest_csv(args.manifest)
    rows = []
    failures = 0
    for path in args.checkpoints:
        method = os.path.splitext(os.path.basename(path))[0]
        try:
            model, _payload, _sidecar = load_checkpoint(path, map_location=args.device)
            report = validate(model, manifest, device=args.device)
            protocol = _protocol_from_args(args)
            report.fps = fps_benchmark(model, protocol, device=args.device).fps
            rows.append((method, report))
        except (LapsegError, OSError, RuntimeError) as exc:
            print(f"FAILED {path}: {exc}", file=sys.stderr)
            failures += 1
    if rows:
        os.makedirs(args.out, exist_ok=True)
        write_report_csv(rows, os.path.join(args.out, "compare.csv"))
        table = format_markdown_table(rows)
        with open(os.path.join(args.out, "compare.md"), "w", encoding="utf-8") as fh:
            fh.write(table)
        print(table, end="")
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lapseg",
        description="Train, evaluate, and benchmark laparoscopic instrument segmentation")
    parser.add_argument("--version", action="version", version=f"lapseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    device_default = os.environ.get("LAPSEG_DEVICE")

    p = sub.add_parser("prepare", help="scan a dataset and write split manifests")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=("paired_dirs", "manifest_csv"), default="paired_dirs")
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from manifests")
    p.add_argument("--config", help="flat JSON run config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume-from")
    p.add_argument("--num-workers", type=int, default=0)
    p.add_argument("--backbone-a")
    p.add_argument("--backbone-b")
    p.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--se-reduction", type=int)
    p.add_argument("--input-size", help="WIDTHxHEIGHT, each divisible by 32")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-schedule", choices=("constant", "reduce_on_plateau"))
    p.add_argument("--device", default=device_default)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--aug-probability", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute the metric suite on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.add_argument("--method")
    p.add_argument("--input-size")
    p.add_argument("--device", default=device_default or "cpu")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write {0,255} mask PNGs for input frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--device", default=device_default or "cpu")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="measure inference FPS")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup-iters", type=int, default=10)
    p.add_argument("--timed-iters", type=int, default=100)
    p.add_argument("--input-size")
    p.add_argument("--statistic", choices=("median", "mean"), default="median")
    p.add_argument("--out-csv")
    p.add_argument("--device", default=device_default or "cpu")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="evaluate and benchmark several checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for compare.csv/.md")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup-iters", type=int, default=10)
    p.add_argument("--timed-iters", type=int, default=100)
    p.add_argument("--input-size")
    p.add_argument("--statistic", choices=("median", "mean"), default="median")
    p.add_argument("--device", default=device_default or "cpu")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PRECONDITION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LapsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
