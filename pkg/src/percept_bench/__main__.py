"""Entry point: python -m percept_bench"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .benchmark import (
    IMAGE_SUFFIXES,
    dataset_frames,
    load_detector,
    run_benchmark,
    save_detector,
    synthetic_backgrounds,
    synthetic_frames,
    synthetic_models,
    train_detector,
)
from .config import HarnessConfig, load_config
from .errors import ConfigError, PerceptionError
from .evaluation import format_detections, parse_annotations, write_annotations
from .features import export_features_text, extract_features, write_features
from .imaging import Image, load_image, write_label_pgm, write_pgm
from .models import Condition
from .segmentation import canny, floodcanny

logger = logging.getLogger(__name__)

_LOG_ENV = "PERCEPT_BENCH_LOG_LEVEL"


def _images_in(directory: str | Path) -> list[Image]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigError(f"No images found in {directory}")
    return [load_image(p) for p in paths]


def _training_set(args: argparse.Namespace, cfg: HarnessConfig) -> tuple[list[tuple[str, Image]], list[Image]]:
    """One training image per class: the first normal-condition annotated crop
    when a dataset is given, synthetic textured models otherwise."""
    backgrounds = _images_in(args.negatives) if args.negatives else synthetic_backgrounds(cfg)
    annotations = args.annotations or cfg.bench.annotations
    if annotations is None:
        return synthetic_models(cfg), backgrounds
    frames_dir = Path(args.frames or cfg.bench.frames_dir or ".")
    chosen: dict[str, tuple[int, object]] = {}
    for r in parse_annotations(annotations):
        rank = 0 if r.conditions == frozenset({Condition.NORMAL}) else 1
        if r.class_name not in chosen or rank < chosen[r.class_name][0]:
            chosen[r.class_name] = (rank, r)
    models = []
    for name in sorted(chosen):
        record = chosen[name][1]
        img = load_image(frames_dir / record.frame_id)
        window = record.box.clip(img.width, img.height)
        if window is None:
            logger.warning("Annotation for %s lies outside %s", name, record.frame_id)
            continue
        models.append((name, img.crop(window.to_window())))
    return models, backgrounds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_extract(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    img = load_image(args.image)
    features = extract_features(img, cfg.features)
    write_features(features, args.output)
    if args.text:
        export_features_text(features, args.text)
    if args.labels:
        p = cfg.proposals
        regions = floodcanny(img, canny(img, p.canny_low, p.canny_high, p.canny_sigma), p)
        labels = regions[0].labels if regions else np.zeros(img.shape, dtype=np.int32)
        write_label_pgm(labels, args.labels)
    print(f"{len(features)} keypoints -> {args.output}")
    return 0


def _train(method: str):
    def run(args: argparse.Namespace, cfg: HarnessConfig) -> int:
        models, backgrounds = _training_set(args, cfg)
        if not models:
            raise ConfigError("No training images")
        detector = train_detector(method, models, backgrounds, cfg)
        save_detector(detector, args.output)
        print(f"{method} model for {len(models)} classes -> {args.output}")
        return 0

    return run


def cmd_detect(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    detector = load_detector(args.method, args.model, cfg)
    lines = []
    for path in args.images:
        lines.append(format_detections(detector.detect(load_image(path), Path(path).name)))
    text = "".join(lines)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    method = args.method or cfg.bench.method
    model_path = args.model or cfg.bench.model_path
    out_dir = args.out or cfg.bench.out_dir
    detector = load_detector(method, model_path, cfg) if model_path else None
    if cfg.bench.annotations is not None:
        frames = dataset_frames(cfg.bench.annotations, cfg.bench.frames_dir)
        if detector is None:
            raise ConfigError("A dataset benchmark needs a trained model (--model)")
    else:
        models = synthetic_models(cfg)
        backgrounds = synthetic_backgrounds(cfg)
        if detector is None:
            detector = train_detector(method, models, backgrounds, cfg)
        frames = synthetic_frames(models, backgrounds, cfg)
    result = run_benchmark(frames, method, cfg, detector=detector, out_dir=out_dir)
    agg = result.report.aggregate
    print(f"{method}: precision {agg.precision:.3f} recall {agg.recall:.3f} f {agg.f:.3f} -> {out_dir}")
    return 0


def cmd_synth(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    models = synthetic_models(cfg)
    frames = synthetic_frames(models, synthetic_backgrounds(cfg), cfg)
    for name, img in models:
        write_pgm(img, out / "models" / f"{name}.pgm")
    records = []
    for frame in frames:
        write_pgm(frame.image, out / "frames" / f"{frame.frame_id}.pgm")
        records.extend(frame.records)
    # annotation frame ids name the written files
    write_annotations([replace(r, frame_id=f"{r.frame_id}.pgm") for r in records], out / "annotations.txt")
    print(f"{len(frames)} frames, {len(records)} instances -> {out}")
    return 0


def cmd_view(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    from .app import ReportViewer

    ReportViewer(args.report).run()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="percept-bench", description=__doc__)
    parser.add_argument("--log-level", default=os.environ.get(_LOG_ENV, "WARNING"))
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="detect and describe keypoints")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--text", help="also write a text export")
    p.add_argument("--labels", help="also write the floodcanny region labels as a PGM")
    p.set_defaults(func=cmd_extract)

    for method in ("sift", "tree", "cascade"):
        p = sub.add_parser(f"train-{method}", parents=[common], help=f"train a {method} model")
        p.add_argument("-o", "--output", required=True)
        p.add_argument("--annotations")
        p.add_argument("--frames")
        p.add_argument("--negatives", help="directory of object-free images")
        p.set_defaults(func=_train("vtree" if method == "tree" else method))

    p = sub.add_parser("detect", parents=[common], help="run a trained detector on images")
    p.add_argument("--method", required=True, choices=("sift", "vtree", "cascade"))
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", parents=[common], help="detect, score and write a report")
    p.add_argument("--method", choices=("sift", "vtree", "cascade"))
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark to disk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("view", parents=[common], help="browse a report.json")
    p.add_argument("report")
    p.set_defaults(func=cmd_view)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand; 0 on success, 1 on a processing error, 2 on bad configuration."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"percept-bench: configuration error: {exc}", file=sys.stderr)
        return 2
    except PerceptionError as exc:
        print(f"percept-bench: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
