"""Seeded synthetic data: textured object models, clutter backgrounds, composited
scenes with exact ground truth, and blob/noise samples for cascade training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .imaging import BoundingBox, Image
from .models import AnnotationRecord, Condition

logger = logging.getLogger(__name__)


def _stretch(values: np.ndarray, lo: float = 0.0, hi: float = 255.0) -> np.ndarray:
    vmin, vmax = float(values.min()), float(values.max())
    if vmax - vmin < 1e-12:
        return np.full(values.shape, (lo + hi) / 2.0)
    return lo + (values - vmin) * (hi - lo) / (vmax - vmin)


def make_texture(width: int, height: int, rng: np.random.Generator) -> Image:
    """Band-passed noise plus random filled rectangles and discs: many stable
    blobs and corners at several scales."""
    base = np.zeros((height, width))
    for sigma, gain in ((1.5, 0.6), (4.0, 1.0), (9.0, 0.8)):
        base += gain * _stretch(ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma), -1.0, 1.0)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(max(4, (width * height) // 2500)):
        value = rng.uniform(-1.5, 1.5)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = rng.uniform(3, max(4.0, min(width, height) / 6))
        if rng.random() < 0.5:
            base[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] += value
        else:
            base[(np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.5, 1.5))] += value
    # the 1% tails left by stacked shapes saturate instead of setting the range
    lo, hi = np.percentile(base, [1.0, 99.0])
    return Image(np.rint(_stretch(np.clip(base, lo, hi), 10.0, 245.0)).astype(np.uint8))


def make_clutter(width: int, height: int, rng: np.random.Generator, shapes: int = 60) -> Image:
    """Flat-shaded rectangles over a smooth gradient with mild noise."""
    yy, xx = np.mgrid[0:height, 0:width]
    g = rng.uniform(-0.2, 0.2, size=2)
    img = 110.0 + 60.0 * (g[0] * xx / width + g[1] * yy / height)
    for _ in range(shapes):
        w = rng.integers(width // 20, width // 4)
        h = rng.integers(height // 20, height // 4)
        x = rng.integers(0, width - w)
        y = rng.integers(0, height - h)
        img[y:y + h, x:x + w] = rng.uniform(30, 225)
    img = ndimage.gaussian_filter(img, 1.0) + rng.normal(0, 3.0, size=img.shape)
    return Image(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def default_models(n: int, rng: np.random.Generator, size: tuple[int, int] = (160, 120)) -> list[tuple[str, Image]]:
    return [(f"object_{i:02d}", make_texture(size[0], size[1], rng)) for i in range(n)]


@dataclass(frozen=True)
class SceneSpec:
    width: int = 640
    height: int = 480
    instances: int = 1
    scale_range: tuple[float, float] = (0.7, 1.2)
    max_rotation_deg: float = 30.0
    max_shear: float = 0.05
    identity_pose: bool = False
    blur_prob: float = 0.0
    blur_sigma: float = 2.0
    illumination_prob: float = 0.0
    illumination_gains: tuple[float, float] = (0.45, 1.6)
    occlusion_prob: float = 0.0
    occlusion_fraction: float = 0.3
    max_tries: int = 50

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.instances < 0:
            raise ConfigError("scene dimensions must be positive and instances non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        for p in (self.blur_prob, self.illumination_prob, self.occlusion_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probabilities must be in [0, 1], got {p}")


@dataclass(frozen=True)
class Placement:
    """Model-to-scene affine map ``p' = m @ p + t`` in continuous coordinates."""

    m: np.ndarray
    t: np.ndarray

    def corners(self, width: int, height: int) -> np.ndarray:
        pts = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
        return pts @ self.m.T + self.t

    def box(self, width: int, height: int) -> BoundingBox:
        c = self.corners(width, height)
        lo, hi = c.min(axis=0), c.max(axis=0)
        return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def _sample_linear(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.identity_pose:
        return np.eye(2)
    theta = np.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    scale = rng.uniform(*spec.scale_range)
    shear = rng.uniform(-spec.max_shear, spec.max_shear)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return scale * rot @ np.array([[1.0, shear], [0.0, 1.0]])


def _warp(model: np.ndarray, p: Placement, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Model pixels and coverage resampled into a ``width`` x ``height`` frame."""
    # index-space map in (row, col) order; pixel centres sit at +0.5
    a, b, c, d = p.m[0, 0], p.m[0, 1], p.m[1, 0], p.m[1, 1]
    rc = np.array([[d, c], [b, a]])
    shift = rc @ np.array([0.5, 0.5]) + np.array([p.t[1], p.t[0]]) - 0.5
    inv = np.linalg.inv(rc)
    offset = -inv @ shift
    pixels = ndimage.affine_transform(model.astype(np.float64), inv, offset=offset,
                                      output_shape=(height, width), order=1, cval=0.0)
    alpha = ndimage.affine_transform(np.ones(model.shape), inv, offset=offset,
                                     output_shape=(height, width), order=1, cval=0.0)
    return pixels, np.clip(alpha, 0.0, 1.0)


def _overlaps(box: BoundingBox, others: list[BoundingBox]) -> bool:
    return any(box.intersection_area(o) > 0 for o in others)


def generate_synthetic_scene(
    models: list[tuple[str, Image]],
    backgrounds: list[Image],
    spec: SceneSpec | None = None,
    seed: int | np.random.SeedSequence = 0,
    frame_id: str = "frame",
) -> tuple[Image, list[AnnotationRecord]]:
    """Composite ``spec.instances`` randomly chosen models onto a background.

    Instances never overlap one another; a pose whose projection does not fit
    the frame is resampled.
    """
    if not models or not backgrounds:
        raise ConfigError("at least one model and one background are required")
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    if bg.shape != (spec.height, spec.width):
        zoom = (spec.height / bg.height, spec.width / bg.width)
        canvas = ndimage.zoom(bg.data.astype(np.float64), zoom, order=1)[: spec.height, : spec.width]
    else:
        canvas = bg.data.astype(np.float64)
    canvas = canvas.copy()

    records: list[AnnotationRecord] = []
    boxes: list[BoundingBox] = []
    for _ in range(spec.instances):
        name, model = models[int(rng.integers(len(models)))]
        placement = None
        for _ in range(spec.max_tries):
            m = _sample_linear(spec, rng)
            extent = Placement(m, np.zeros(2)).box(model.width, model.height)
            room_x = spec.width - extent.width
            room_y = spec.height - extent.height
            if room_x < 0 or room_y < 0:
                continue
            if spec.identity_pose:
                t = np.array([float(rng.integers(0, int(room_x) + 1)), float(rng.integers(0, int(room_y) + 1))])
            else:
                t = np.array([rng.uniform(0, room_x), rng.uniform(0, room_y)])
            candidate = Placement(m, t - np.array([extent.x_min, extent.y_min]))
            box = candidate.box(model.width, model.height).clip(spec.width, spec.height)
            if box is None or _overlaps(box, boxes):
                continue
            placement = candidate
            break
        if placement is None:
            logger.warning("Could not place %s in %s after %d tries", name, frame_id, spec.max_tries)
            continue

        pixels, alpha = _warp(model.data, placement, spec.width, spec.height)
        conditions: set[Condition] = set()
        if rng.random() < spec.blur_prob:
            pixels = ndimage.gaussian_filter(pixels, spec.blur_sigma)
            alpha = ndimage.gaussian_filter(alpha, spec.blur_sigma * 0.5)
            conditions.add(Condition.BLUR)
        if rng.random() < spec.illumination_prob:
            pixels = np.clip(pixels * rng.uniform(*spec.illumination_gains), 0, 255)
            conditions.add(Condition.ILLUMINATION)
        canvas = canvas * (1.0 - alpha) + pixels * alpha

        box = placement.box(model.width, model.height).clip(spec.width, spec.height)
        if rng.random() < spec.occlusion_prob:
            # cover one side of the instance with a flat occluder
            frac = spec.occlusion_fraction
            x0, y0, x1, y1 = (int(round(v)) for v in box.as_tuple())
            if rng.random() < 0.5:
                cut = x0 + int(round((x1 - x0) * frac))
                canvas[y0:y1, x0:cut] = rng.uniform(20, 235)
            else:
                cut = y0 + int(round((y1 - y0) * frac))
                canvas[y0:cut, x0:x1] = rng.uniform(20, 235)
            conditions.add(Condition.OCCLUDED)
        boxes.append(box)
        records.append(AnnotationRecord(frame_id, name, box, frozenset(conditions or {Condition.NORMAL})))
    return Image(np.clip(np.rint(canvas), 0, 255).astype(np.uint8)), records


def generate_benchmark(
    models: list[tuple[str, Image]],
    backgrounds: list[Image],
    spec: SceneSpec | None = None,
    n_scenes: int = 50,
    seed: int = 0,
) -> list[tuple[str, Image, list[AnnotationRecord]]]:
    """``n_scenes`` scenes, each from its own child seed of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    scenes = []
    for i, child in enumerate(children):
        frame_id = f"scene{i:04d}"
        img, records = generate_synthetic_scene(models, backgrounds, spec, child, frame_id)
        scenes.append((frame_id, img, records))
    logger.info("Generated %d synthetic scenes (seed %d)", n_scenes, seed)
    return scenes


# ---------------------------------------------------------------------------
# Two-class cascade task
# ---------------------------------------------------------------------------

def noise_image(width: int, height: int, rng: np.random.Generator) -> Image:
    values = ndimage.gaussian_filter(rng.normal(80.0, 25.0, size=(height, width)), 0.7)
    return Image(np.clip(np.rint(values), 0, 255).astype(np.uint8))


def blob_patch(rng: np.random.Generator, size: int = 24) -> Image:
    """Bright Gaussian blob near the patch centre over noise."""
    bg = noise_image(size, size, rng).data.astype(np.float64)
    sigma = rng.uniform(0.17, 0.22) * size
    cx = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0)
    cy = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size]
    blob = rng.uniform(120.0, 160.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    return Image(np.clip(np.rint(bg + blob), 0, 255).astype(np.uint8))


def blob_patches(n: int, seed: int = 0, size: int = 24) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([blob_patch(rng, size).data for _ in range(n)])


def blob_scene(
    width: int, height: int, box_size: int, rng: np.random.Generator
) -> tuple[Image, BoundingBox]:
    """Noise frame with one planted blob; returns the blob's square box."""
    canvas = noise_image(width, height, rng).data.astype(np.float64)
    patch = blob_patch(rng, box_size).data.astype(np.float64)
    x = int(rng.integers(0, width - box_size + 1))
    y = int(rng.integers(0, height - box_size + 1))
    canvas[y:y + box_size, x:x + box_size] = patch
    return Image(np.clip(np.rint(canvas), 0, 255).astype(np.uint8)), BoundingBox(x, y, x + box_size, y + box_size)
