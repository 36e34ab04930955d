"""Command-line entry point: ``ehsod <command> ...``.

Progress goes to stderr; results go to files (or stdout for ``infer`` when
no output path is given).  Failures print one line
``error: <category>: <message>`` and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__, cam_rpn
from .config import ConfigError, load_config
from .data import DatasetError, SyntheticConfig, generate_synthetic, hybrid_split, load_dataset
from .engine import (TrainingDiverged, evaluate, infer, infer_records, load_checkpoint,
                     normalize_image, train)

log = logging.getLogger("ehsod")

DEVICE_ENV = "EHSOD_DEVICE"

EXIT_CODES = {"usage": 2, "config": 3, "dataset": 4, "io": 5, "checkpoint": 6,
              "diverged": 7, "device": 8}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _device() -> str:
    device = os.environ.get(DEVICE_ENV, "cpu").strip().lower()
    if device != "cpu":
        raise CliError("device", f"{DEVICE_ENV}={device!r} is not supported; this build runs on cpu")
    return device


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in [0, 1], got {value}")
    return value


def _read_image(path: str) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise CliError("io", f"cannot read image {path}: {exc}") from None


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint not found: {path}") from None
    except (ValueError, KeyError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from None


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def cmd_generate(args) -> None:
    spec = {}
    if args.spec:
        spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    for key in ("n_images", "image_size", "seed"):
        if getattr(args, key) is not None:
            spec[key] = getattr(args, key)
    try:
        cfg = SyntheticConfig(**spec)
    except TypeError as exc:
        raise CliError("config", f"bad synthetic spec: {exc}") from None
    manifest = generate_synthetic(cfg)
    out = Path(args.output)
    manifest.save(out / "manifest.json")
    log.info("wrote %d images to %s", len(manifest), out)


def cmd_split(args) -> None:
    manifest = load_dataset(args.input, args.format)
    split = hybrid_split(manifest, args.fraction, args.seed)
    out_dir = Path(args.output).resolve().parent
    for r in split.records:
        if r.file and manifest.root:
            src = (Path(manifest.root) / r.file).resolve()
            r.file = os.path.relpath(src, out_dir)
    split.save(args.output)
    n_full = sum(r.is_full for r in split.records)
    log.info("%d full / %d weak records written to %s", n_full, len(split) - n_full, args.output)


def _evaluate_to(model, categories, manifest, out_dir: Path, eleven_point: bool = False):
    from .plotting import save_report

    if list(categories) != list(manifest.categories):
        raise CliError("dataset", f"checkpoint categories {categories} differ from "
                                  f"test set categories {manifest.categories}")
    records = manifest.records
    dets = infer_records(model, records, [manifest.image(r) for r in records])
    report = evaluate(dets, manifest, eleven_point=eleven_point)
    save_report(report, out_dir)
    return report


def cmd_train(args) -> None:
    from .plotting import plot_loss_curve

    overrides = list(args.set or [])
    if args.data:
        overrides.append(f"data.train={json.dumps(str(args.data))}")
    if args.test:
        overrides.append(f"data.test={json.dumps(str(args.test))}")
    config = load_config(args.config, overrides, args.preset)
    if not config.data.train:
        raise CliError("usage", "no training data: pass --data or set data.train")
    manifest = load_dataset(config.data.train, config.data.format)
    out = Path(args.output)
    n_iter = [0]

    def progress(row):
        n_iter[0] += 1
        if n_iter[0] % args.log_every == 0:
            log.info("epoch %d iter %d loss %.4f lr %.4g", row["epoch"] + 1, row["iter"],
                     row["total"], row["lr"])

    result = train(manifest, config, out, on_iteration=progress)
    if result.history:
        plot_loss_curve(result.history, out / "loss_curve.png")
    summary = {"epochs": config.train.epochs, "iterations": len(result.history),
               "epoch_losses": result.epoch_losses(), "checkpoint": str(out / "checkpoint.pt")}
    if config.data.test:
        test = load_dataset(config.data.test, config.data.format)
        report = _evaluate_to(result.model, manifest.categories, test, out / "eval")
        summary["map50"] = report.map50
        summary["map_coco"] = report.map_coco
        log.info("final mAP50 %.4f  mAP@[.5:.95] %.4f", report.map50, report.map_coco)
    _write_json(summary, str(out / "summary.json"))


def cmd_eval(args) -> None:
    model, categories, _ = _load_model(args.checkpoint)
    manifest = load_dataset(args.data, args.format)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent / "eval"
    report = _evaluate_to(model, categories, manifest, out, args.eleven_point)
    log.info("mAP50 %.4f  mAP@[.5:.95] %.4f  (%s)", report.map50, report.map_coco, out)


def cmd_infer(args) -> None:
    model, categories, _ = _load_model(args.checkpoint)
    image = _read_image(args.image)
    dets = infer(image, model)
    _write_json({"image": str(args.image), "detections": [d.to_json(categories) for d in dets]},
                args.output)


def cmd_viz_cam(args) -> None:
    from .plotting import plot_cam

    model, categories, _ = _load_model(args.checkpoint)
    image = _read_image(args.image)
    h, w = image.shape[:2]
    ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
    x = torch.zeros(1, 3, ph, pw)
    x[0, :, :h, :w] = normalize_image(image)
    with torch.no_grad():
        _, cam, _, _ = model(x)
    probs = [torch.sigmoid(a[0]).numpy() for a in cam]
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    plot_cam(image, probs, model.strides, categories, args.output)
    image_probs = cam_rpn.cam_image_probs([a[0] for a in cam])
    log.info("image-level class probabilities: %s",
             ", ".join(f"{c}={p:.3f}" for c, p in zip(categories, image_probs.tolist())))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {self.prog}: {' '.join(message.split())}", file=sys.stderr)
        sys.exit(EXIT_CODES["usage"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehsod", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic shapes dataset")
    p.add_argument("--spec", help="YAML file of synthetic generator settings")
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="mark a random fraction of images fully supervised")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="native-json", choices=["native-json", "coco-json", "voc-xml"])
    p.add_argument("--fraction", required=True, type=_fraction)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="output manifest path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--preset", default="default", choices=["default", "synthetic"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--data", help="training manifest (overrides data.train)")
    p.add_argument("--test", help="test manifest evaluated after training (data.test)")
    p.add_argument("--output", required=True, help="run directory")
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="native-json", choices=["native-json", "coco-json", "voc-xml"])
    p.add_argument("--output", help="report directory (default: <checkpoint dir>/eval)")
    p.add_argument("--eleven-point", action="store_true", help="VOC07 11-point AP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect objects in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--output", help="JSON path (default: stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz-cam", help="render class activation maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--output", required=True, help="PNG path")
    p.set_defaults(func=cmd_viz_cam)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        _device()
        args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except DatasetError as exc:
        category, message = "dataset", str(exc)
    except TrainingDiverged as exc:
        category, message = "diverged", str(exc)
    except FileNotFoundError as exc:
        category, message = "io", str(exc)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        category, message = "io", str(exc)
    else:
        return 0
    print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
