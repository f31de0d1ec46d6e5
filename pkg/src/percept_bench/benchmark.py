"""Benchmark runs: frame sources, detector training and loading, the timed
detect-and-score loop, and the cascade training-set-size sweep."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np

from .cascade import (
    BASE_SIZE,
    BoostConfig,
    CascadeDetector,
    load_cascades,
    save_cascades,
    synth_views,
    train_cascade,
)
from .config import HarnessConfig
from .errors import ConfigError, ModelFileError
from .evaluation import (
    EvalReport,
    TimingStats,
    build_report,
    f_measure,
    parse_annotations,
    write_detections,
    write_report,
)
from .imaging import Image, Window, load_image
from .models import AnnotationRecord, Detection, Method
from .sift_recognizer import SiftRecognizer, build_model, load_models, save_models
from .synthetic import blob_patches, default_models, generate_benchmark, make_clutter, noise_image
from .vocab_tree import BACKGROUND, VocabTreeDetector, load_database, save_database, train_database

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".bmp")


class Detector(Protocol):
    def detect(self, img: Image, frame_id: str = "") -> list[Detection]: ...


@dataclass(eq=False)
class Frame:
    frame_id: str
    image: Image
    records: list[AnnotationRecord]


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------

def dataset_frames(annotations: str | Path, frames_dir: str | Path) -> list[Frame]:
    """Every image in ``frames_dir`` (sorted by name) with its annotations.
    Frames without annotations are kept: they can only produce false positives."""
    records = parse_annotations(annotations)
    frames_dir = Path(frames_dir)
    by_frame: dict[str, list[AnnotationRecord]] = {}
    for r in records:
        by_frame.setdefault(r.frame_id, []).append(r)
    names = sorted(p.name for p in frames_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    missing = sorted(set(by_frame) - set(names))
    if missing:
        raise ConfigError(f"Annotated frames missing from {frames_dir}: {', '.join(missing[:5])}")
    return [Frame(name, load_image(frames_dir / name), by_frame.get(name, [])) for name in names]


def synthetic_models(cfg: HarnessConfig) -> list[tuple[str, Image]]:
    return default_models(cfg.bench.n_models, np.random.default_rng([cfg.seed, 1]), cfg.bench.model_size)


def synthetic_backgrounds(cfg: HarnessConfig) -> list[Image]:
    rng = np.random.default_rng([cfg.seed, 2])
    return [make_clutter(cfg.scene.width, cfg.scene.height, rng) for _ in range(cfg.bench.n_backgrounds)]


def synthetic_frames(
    models: list[tuple[str, Image]], backgrounds: list[Image], cfg: HarnessConfig
) -> list[Frame]:
    """Seeded scenes with planted models, then object-free scenes."""
    frames = [
        Frame(fid, img, recs)
        for fid, img, recs in generate_benchmark(models, backgrounds, cfg.scene, cfg.bench.n_scenes, cfg.seed)
    ]
    if cfg.bench.null_scenes:
        empty = replace(cfg.scene, instances=0)
        for fid, img, _ in generate_benchmark(models, backgrounds, empty, cfg.bench.null_scenes, cfg.seed + 1):
            frames.append(Frame(fid.replace("scene", "null"), img, []))
    return frames


# ---------------------------------------------------------------------------
# Detectors
# ---------------------------------------------------------------------------

def _tiles(backgrounds: list[Image], size: tuple[int, int], count: int, seed: int) -> list[Image]:
    rng = np.random.default_rng(seed)
    w, h = size
    out = []
    for _ in range(count):
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        x = int(rng.integers(0, max(1, bg.width - w + 1)))
        y = int(rng.integers(0, max(1, bg.height - h + 1)))
        out.append(bg.crop(Window(x, y, min(bg.width, x + w), min(bg.height, y + h))))
    return out


def cascade_positives(model: Image, views: int, seed: int) -> np.ndarray:
    """The model shrunk to the base window plus ``views`` perturbed copies."""
    base = Image(cv2.resize(model.data, (BASE_SIZE, BASE_SIZE), interpolation=cv2.INTER_AREA))
    samples = [base] + (synth_views(base, views, seed) if views else [])
    return np.stack([s.data for s in samples])


def train_detector(
    method: str | Method, models: list[tuple[str, Image]], backgrounds: list[Image], cfg: HarnessConfig
) -> Detector:
    method = _method(method)
    if method is Method.SIFT:
        built = [build_model(img, name, name, cfg.sift.features) for name, img in models]
        return SiftRecognizer(built, cfg.sift)
    if method is Method.VTREE:
        images = list(models) + [
            (BACKGROUND, tile) for tile in _tiles(backgrounds, cfg.bench.model_size, cfg.bench.background_tiles, cfg.seed)
        ]
        db = train_database([(img, label) for label, img in images], cfg.tree, cfg.sift.features)
        return VocabTreeDetector(db, cfg.vocab, cfg.sift.features, cfg.proposals)
    cascades = []
    for i, (name, img) in enumerate(models):
        positives = cascade_positives(img, cfg.bench.views_per_model, cfg.seed + i)
        cascades.append(train_cascade(positives, backgrounds, cfg.boost, name))
    return CascadeDetector(cascades, cfg.scan)


def save_detector(detector: Detector, path: str | Path) -> None:
    if isinstance(detector, SiftRecognizer):
        save_models(list(detector.models.values()), path)
    elif isinstance(detector, VocabTreeDetector):
        save_database(detector.db, path)
    elif isinstance(detector, CascadeDetector):
        save_cascades(detector.cascades, path)
    else:
        raise ConfigError(f"Cannot persist {type(detector).__name__}")


def load_detector(method: str | Method, model_path: str | Path | None, cfg: HarnessConfig) -> Detector:
    method = _method(method)
    if model_path is None:
        raise ModelFileError(f"No model file given for method {method.value}")
    if not Path(model_path).exists():
        raise ModelFileError(f"Model file not found: {model_path}")
    if method is Method.SIFT:
        return SiftRecognizer(load_models(model_path), cfg.sift)
    if method is Method.VTREE:
        return VocabTreeDetector(load_database(model_path), cfg.vocab, cfg.sift.features, cfg.proposals)
    return CascadeDetector(load_cascades(model_path), cfg.scan)


def _method(method: str | Method) -> Method:
    try:
        return Method(method)
    except ValueError:
        raise ConfigError(f"Unknown method {method!r}") from None


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BenchResult:
    report: EvalReport
    timing: TimingStats
    detections: list[Detection]


def run_benchmark(
    frames: list[Frame],
    method: str | Method,
    cfg: HarnessConfig,
    detector: Detector | None = None,
    model_path: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> BenchResult:
    """Detect on every frame, score against the ground truth and optionally
    write the report files. The model is loaded before any frame is touched."""
    method = _method(method)
    if detector is None:
        detector = load_detector(method, model_path, cfg)
    timing = TimingStats()
    detections: list[Detection] = []
    gts: list[AnnotationRecord] = []
    counts_windows = isinstance(detector, VocabTreeDetector)
    windows = 0
    for frame in frames:
        start = time.perf_counter()
        if counts_windows:
            found, evaluated = detector.detect_counted(frame.image, frame.frame_id)
            windows += evaluated
        else:
            found = detector.detect(frame.image, frame.frame_id)
        timing.per_frame_ms.append((time.perf_counter() - start) * 1000.0)
        detections.extend(found)
        gts.extend(frame.records)
        logger.debug("%s: %d detections, %d ground truth", frame.frame_id, len(found), len(frame.records))
    report, _ = build_report(method.value, detections, gts, len(frames), cfg.metric, cfg.bench.groups)
    if counts_windows:
        report.extras["windows_evaluated"] = windows
    agg = report.aggregate
    logger.info(
        "%s over %d frames: precision %.3f recall %.3f f %.3f (%.1f ms/frame)",
        method.value, len(frames), agg.precision, agg.recall, agg.f, timing.mean_ms,
    )
    if out_dir is not None:
        write_report(report, out_dir, timing)
        write_detections(detections, Path(out_dir) / "detections.txt")
    return BenchResult(report, timing, detections)


@dataclass(frozen=True)
class SweepPoint:
    positives: int
    stages: int
    detection_rate: float
    fp_rate: float
    f: float


def training_size_sweep(
    sizes: tuple[int, ...] = (50, 500),
    cfg: BoostConfig | None = None,
    held_out: int = 300,
    pool_images: int = 10,
    seed: int = 0,
) -> list[SweepPoint]:
    """Cascades on the blob task trained with growing positive sets, scored on
    a shared held-out set of blob and noise patches."""
    cfg = cfg or BoostConfig(max_stages=5, max_stumps=20, negatives_per_stage=400)
    rng = np.random.default_rng([seed, 3])
    pool = [noise_image(160, 120, rng) for _ in range(pool_images)]
    test_pos = blob_patches(held_out, seed + 10_000)
    test_neg = np.stack([noise_image(BASE_SIZE, BASE_SIZE, rng).data for _ in range(held_out)])
    points = []
    for n in sizes:
        cascade = train_cascade(blob_patches(n, seed), pool, cfg, "blob")
        tp = int(cascade.classify_patches(test_pos).sum())
        fp = int(cascade.classify_patches(test_neg).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / held_out
        points.append(SweepPoint(n, len(cascade.stages), recall, fp / held_out, f_measure(precision, recall)))
        logger.info("Sweep %d positives: d=%.3f f=%.3f", n, recall, fp / held_out)
    return points
