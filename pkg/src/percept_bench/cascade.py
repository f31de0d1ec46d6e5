"""Boosted Haar-feature cascade: features on integral images, AdaBoost stages,
negative bootstrapping, synthetic training views and multi-scale scanning."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import ConfigError, GeometryError, ModelFileError, TrainingError
from .imaging import BoundingBox, Image, IntegralImage, Window, integral_build, rect_sum
from .models import Detection

logger = logging.getLogger(__name__)

BASE_SIZE = 24
CASCADE_FORMAT = "percept-bench-cascade"
CASCADE_FORMAT_VERSION = 1
MIN_EPSILON = 1e-10


class HaarKind(Enum):
    TWO_VERTICAL = "two_vertical"
    TWO_HORIZONTAL = "two_horizontal"
    THREE = "three"
    FOUR = "four"


# (cells across, cells down, weight per cell in row-major order)
_LAYOUT: dict[HaarKind, tuple[int, int, tuple[int, ...]]] = {
    HaarKind.TWO_VERTICAL: (2, 1, (-1, 1)),
    HaarKind.TWO_HORIZONTAL: (1, 2, (-1, 1)),
    HaarKind.THREE: (3, 1, (1, -2, 1)),
    HaarKind.FOUR: (2, 2, (1, -1, -1, 1)),
}


@dataclass(frozen=True)
class HaarFeature:
    """Equal-sized cells at (x, y) in the base window; weights sum to zero."""

    kind: HaarKind
    x: int
    y: int
    cell_w: int
    cell_h: int

    @property
    def width(self) -> int:
        return _LAYOUT[self.kind][0] * self.cell_w

    @property
    def height(self) -> int:
        return _LAYOUT[self.kind][1] * self.cell_h

    def rects(self, scale: float = 1.0) -> list[tuple[int, int, int, int, int]]:
        """(x, y, w, h, weight) per cell, floored uniformly at ``scale``."""
        across, down, weights = _LAYOUT[self.kind]
        cw = max(1, int(math.floor(self.cell_w * scale)))
        ch = max(1, int(math.floor(self.cell_h * scale)))
        x0 = int(math.floor(self.x * scale))
        y0 = int(math.floor(self.y * scale))
        out = []
        for j in range(down):
            for i in range(across):
                out.append((x0 + i * cw, y0 + j * ch, cw, ch, weights[j * across + i]))
        return out


def feature_pool(
    window: tuple[int, int] = (BASE_SIZE, BASE_SIZE), stride: int = 2, size_step: int = 2
) -> list[HaarFeature]:
    """Every feature of every kind on a ``stride`` position grid and a
    ``size_step`` cell-size grid inside the base window."""
    if stride < 1 or size_step < 1:
        raise ConfigError("stride and size_step must be >= 1")
    w0, h0 = window
    pool = []
    for kind, (across, down, _) in _LAYOUT.items():
        for cw in range(1, w0 // across + 1, size_step):
            for ch in range(1, h0 // down + 1, size_step):
                for y in range(0, h0 - down * ch + 1, stride):
                    for x in range(0, w0 - across * cw + 1, stride):
                        pool.append(HaarFeature(kind, x, y, cw, ch))
    return pool


def window_sigma(ii: IntegralImage, ii_sq: IntegralImage, window: Window) -> float:
    n = window.area
    s = rect_sum(ii, window)
    sq = rect_sum(ii_sq, window)
    mean = s / n
    return math.sqrt(max(sq / n - mean * mean, 0.0))


def haar_raw(f: HaarFeature, ii: IntegralImage, window: Window, scale: float = 1.0) -> int:
    """Weighted rectangle sum, exact integer arithmetic."""
    total = 0
    for x, y, w, h, weight in f.rects(scale):
        if x + w > window.width or y + h > window.height:
            raise GeometryError(f"{f} at scale {scale} does not fit {window.width}x{window.height} window")
        cell = Window(window.x_min + x, window.y_min + y, window.x_min + x + w, window.y_min + y + h)
        total += weight * rect_sum(ii, cell)
    return total


def eval_haar(
    f: HaarFeature,
    ii: IntegralImage,
    window: Window,
    scale: float = 1.0,
    ii_sq: IntegralImage | None = None,
    base: tuple[int, int] = (BASE_SIZE, BASE_SIZE),
) -> float:
    """Feature response normalised by the window standard deviation and the
    window area relative to the base window."""
    raw = haar_raw(f, ii, window, scale)
    sigma = window_sigma(ii, ii_sq, window) if ii_sq is not None else 1.0
    area_ratio = window.area / float(base[0] * base[1])
    return raw / (max(sigma, 1.0) * area_ratio)


# ---------------------------------------------------------------------------
# Batched responses
# ---------------------------------------------------------------------------

def coefficient_matrix(features: list[HaarFeature], window: tuple[int, int] = (BASE_SIZE, BASE_SIZE)) -> np.ndarray:
    """Matrix C with ``flattened integral image @ C`` giving every raw response."""
    w0, h0 = window
    stride = w0 + 1
    c = np.zeros(((h0 + 1) * (w0 + 1), len(features)))
    for j, f in enumerate(features):
        for x, y, w, h, weight in f.rects():
            c[(y + h) * stride + x + w, j] += weight
            c[y * stride + x, j] += weight
            c[y * stride + x + w, j] -= weight
            c[(y + h) * stride + x, j] -= weight
    return c


def _patch_tables(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(patches, dtype=np.int64)
    n, h, w = p.shape
    ii = np.zeros((n, h + 1, w + 1), dtype=np.int64)
    ii[:, 1:, 1:] = p.cumsum(axis=1).cumsum(axis=2)
    sq = (p * p).reshape(n, -1).sum(axis=1)
    return ii.reshape(n, -1), sq


def patch_responses(patches: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Normalised responses of base-size patches, shape (n_patches, n_features)."""
    flat, sq = _patch_tables(patches)
    n_pix = patches.shape[1] * patches.shape[2]
    s = flat[:, -1].astype(np.float64)
    mean = s / n_pix
    sigma = np.sqrt(np.maximum(sq / n_pix - mean * mean, 0.0))
    raw = flat.astype(np.float64) @ coeffs
    return raw / np.maximum(sigma, 1.0)[:, None]


# ---------------------------------------------------------------------------
# Boosting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stump:
    feature: HaarFeature
    threshold: float
    polarity: int
    alpha: float
    error: float = 0.0

    def predict(self, responses: np.ndarray) -> np.ndarray:
        """+1 / -1 per response."""
        return np.where(self.polarity * responses > self.polarity * self.threshold, 1.0, -1.0)


@dataclass(eq=False)
class Stage:
    stumps: list[Stump]
    threshold: float
    detection_rate: float = 1.0
    fp_rate: float = 1.0
    errors: list[float] = field(default_factory=list)
    error_bound: list[float] = field(default_factory=list)

    def scores(self, responses_by_feature: list[np.ndarray]) -> np.ndarray:
        total = np.zeros_like(responses_by_feature[0], dtype=np.float64) if responses_by_feature else np.zeros(0)
        for stump, r in zip(self.stumps, responses_by_feature):
            total = total + stump.alpha * stump.predict(r)
        return total


@dataclass(eq=False)
class Cascade:
    stages: list[Stage]
    window: tuple[int, int] = (BASE_SIZE, BASE_SIZE)
    class_name: str = "object"

    @property
    def cumulative_fp(self) -> float:
        return float(np.prod([s.fp_rate for s in self.stages])) if self.stages else 1.0

    @property
    def cumulative_detection(self) -> float:
        return float(np.prod([s.detection_rate for s in self.stages])) if self.stages else 1.0

    def features(self) -> list[HaarFeature]:
        return [st.feature for s in self.stages for st in s.stumps]

    def classify_patches(self, patches: np.ndarray) -> np.ndarray:
        """Acceptance of base-size patches; stages are applied in order."""
        patches = np.asarray(patches)
        accepted = np.ones(len(patches), dtype=bool)
        if not self.stages or len(patches) == 0:
            return accepted
        feats = self.features()
        resp = patch_responses(patches, coefficient_matrix(feats, self.window))
        col = 0
        for stage in self.stages:
            n = len(stage.stumps)
            score = stage.scores([resp[:, col + i] for i in range(n)])
            accepted &= score >= stage.threshold
            col += n
        return accepted


@dataclass(frozen=True)
class BoostConfig:
    min_detection_rate: float = 0.995
    max_fp_rate: float = 0.5
    max_stumps: int = 50
    max_stages: int = 10
    negatives_per_stage: int = 1000
    seed: int = 0
    feature_stride: int = 2
    feature_size_step: int = 2
    scan_scale: float = 1.25
    scan_step: int = 2

    def __post_init__(self) -> None:
        if not (0 < self.min_detection_rate < 1 and 0 < self.max_fp_rate < 1):
            raise ConfigError("detection and false-positive rates must be in (0, 1)")
        if self.max_stumps < 1 or self.max_stages < 1 or self.negatives_per_stage < 1:
            raise ConfigError("stump, stage and negative budgets must be >= 1")
        if self.scan_scale <= 1.0 or self.scan_step < 1:
            raise ConfigError("scan_scale must be > 1 and scan_step >= 1")


def _labels01(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    return (y > 0).astype(np.int64)


def best_stump(responses: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> tuple[int, float, int, float]:
    """(feature column, threshold, polarity, weighted error) minimising the error.

    Thresholds are only placed between distinct sorted responses or beyond
    the extremes; ties keep the lowest column.
    """
    y = _labels01(labels)
    if y.min() == y.max():
        raise TrainingError("Stump training needs both positive and negative samples")
    r = np.asarray(responses, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    n, n_feat = r.shape
    w = np.asarray(weights, dtype=np.float64)
    order = np.argsort(r, axis=0, kind="stable")
    vals = np.take_along_axis(r, order, axis=0)
    wpos = np.where(y == 1, w, 0.0)[order]
    wneg = np.where(y == 0, w, 0.0)[order]
    total_pos, total_neg = wpos[:, 0].sum(), wneg[:, 0].sum()
    cum_pos = np.vstack([np.zeros((1, n_feat)), np.cumsum(wpos, axis=0)])
    cum_neg = np.vstack([np.zeros((1, n_feat)), np.cumsum(wneg, axis=0)])
    # split k puts the k smallest responses at or below the threshold
    err_plus = cum_pos + (total_neg - cum_neg)
    err_minus = cum_neg + (total_pos - cum_pos)
    valid = np.ones((n + 1, n_feat), dtype=bool)
    valid[1:n] = vals[1:] > vals[:-1]
    err_plus = np.where(valid, err_plus, np.inf)
    err_minus = np.where(valid, err_minus, np.inf)

    best_plus = err_plus.min(axis=0)
    best_minus = err_minus.min(axis=0)
    per_feature = np.minimum(best_plus, best_minus)
    j = int(np.argmin(per_feature))
    if best_plus[j] <= best_minus[j]:
        polarity, k = 1, int(np.argmin(err_plus[:, j]))
        error = float(best_plus[j])
    else:
        polarity, k = -1, int(np.argmin(err_minus[:, j]))
        error = float(best_minus[j])
    col = vals[:, j]
    if k == 0:
        threshold = float(col[0] - 1.0)
    elif k == n:
        threshold = float(col[-1] + 1.0)
    else:
        threshold = float(0.5 * (col[k - 1] + col[k]))
    return j, threshold, polarity, error


def train_stump(
    responses: np.ndarray, labels: np.ndarray, weights: np.ndarray, features: list[HaarFeature]
) -> Stump:
    """Exhaustive (feature, threshold, polarity) search; ``alpha`` is left at 0."""
    j, threshold, polarity, error = best_stump(responses, labels, weights)
    return Stump(features[j], threshold, polarity, 0.0, error)


def _stage_threshold(pos_scores: np.ndarray, min_detection_rate: float) -> float:
    k = max(1, math.ceil(min_detection_rate * len(pos_scores)))
    return float(np.sort(pos_scores)[::-1][k - 1])


def train_stage_responses(
    pos: np.ndarray, neg: np.ndarray, features: list[HaarFeature], cfg: BoostConfig
) -> Stage:
    """AdaBoost on precomputed responses (rows = samples, columns = ``features``)."""
    if len(pos) == 0 or len(neg) == 0:
        raise TrainingError("Stage training needs positives and negatives")
    r = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    w = np.concatenate([np.full(len(pos), 1.0 / (2 * len(pos))), np.full(len(neg), 1.0 / (2 * len(neg)))])
    scores = np.zeros(len(r))
    stumps: list[Stump] = []
    errors: list[float] = []
    bound: list[float] = []
    threshold, d, f = 0.0, 1.0, 1.0
    for _ in range(cfg.max_stumps):
        w = w / w.sum()
        j, thr, polarity, eps = best_stump(r, y, w)
        if eps >= 0.5:
            logger.debug("Stopping stage: best weighted error %.4f", eps)
            break
        eps_c = max(eps, MIN_EPSILON)
        alpha = 0.5 * math.log((1.0 - eps_c) / eps_c)
        stump = Stump(features[j], thr, polarity, alpha, eps)
        h = stump.predict(r[:, j])
        scores += alpha * h
        w = w * np.exp(-alpha * y * h)
        stumps.append(stump)
        errors.append(eps)
        bound.append((bound[-1] if bound else 1.0) * 2.0 * math.sqrt(eps_c * (1.0 - eps_c)))

        threshold = _stage_threshold(scores[: len(pos)], cfg.min_detection_rate)
        d = float(np.mean(scores[: len(pos)] >= threshold))
        f = float(np.mean(scores[len(pos):] >= threshold))
        if f <= cfg.max_fp_rate:
            break
    if not stumps:
        raise TrainingError("No weak learner beats chance on this sample set")
    logger.info("Stage: %d stumps, d=%.3f f=%.3f", len(stumps), d, f)
    return Stage(stumps, threshold, d, f, errors, bound)


def train_stage(
    positives: np.ndarray, negatives: np.ndarray, cfg: BoostConfig | None = None,
    features: list[HaarFeature] | None = None,
) -> Stage:
    cfg = cfg or BoostConfig()
    features = features if features is not None else feature_pool(stride=cfg.feature_stride, size_step=cfg.feature_size_step)
    coeffs = coefficient_matrix(features)
    return train_stage_responses(
        patch_responses(np.asarray(positives), coeffs),
        patch_responses(np.asarray(negatives), coeffs),
        features,
        cfg,
    )


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Tables:
    ii: np.ndarray
    sq: np.ndarray


def _tables(img: Image) -> _Tables:
    return _Tables(
        integral_build(img).table.astype(np.float64),
        integral_build(img, squared=True).table.astype(np.float64),
    )


def _box_sums(t: np.ndarray, xs: np.ndarray, ys: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    x0, y0 = xs + x, ys + y
    return t[y0 + h, x0 + w] + t[y0, x0] - t[y0, x0 + w] - t[y0 + h, x0]


def _scan_scale(
    tables: _Tables, cascade: Cascade, scale: float, win_w: int, win_h: int, step: int, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origins and final-stage margins of windows accepted at one scale."""
    gx = np.arange(0, width - win_w + 1, step)
    gy = np.arange(0, height - win_h + 1, step)
    ys, xs = (a.ravel() for a in np.meshgrid(gy, gx, indexing="ij"))
    n_pix = float(win_w * win_h)
    area_ratio = n_pix / float(cascade.window[0] * cascade.window[1])
    margin = np.zeros(len(xs))
    for stage in cascade.stages:
        if len(xs) == 0:
            break
        s = _box_sums(tables.ii, xs, ys, 0, 0, win_w, win_h)
        sq = _box_sums(tables.sq, xs, ys, 0, 0, win_w, win_h)
        mean = s / n_pix
        norm = np.maximum(np.sqrt(np.maximum(sq / n_pix - mean * mean, 0.0)), 1.0) * area_ratio
        score = np.zeros(len(xs))
        for stump in stage.stumps:
            raw = np.zeros(len(xs))
            for x, y, w, h, weight in stump.feature.rects(scale):
                raw += weight * _box_sums(tables.ii, xs, ys, x, y, w, h)
            score += stump.alpha * stump.predict(raw / norm)
        keep = score >= stage.threshold
        xs, ys, margin = xs[keep], ys[keep], (score - stage.threshold)[keep]
    return xs, ys, margin


def scan_windows(
    img: Image, cascade: Cascade, scale_factor: float = 1.25, step: int = 2
) -> list[tuple[Window, float]]:
    """Every window accepted by all stages, with its final-stage margin."""
    w0, h0 = cascade.window
    tables = _tables(img)
    hits: list[tuple[Window, float]] = []
    scale = 1.0
    while True:
        win_w, win_h = int(math.floor(w0 * scale)), int(math.floor(h0 * scale))
        if win_w > img.width or win_h > img.height:
            break
        s_step = max(1, int(round(step * scale)))
        xs, ys, margin = _scan_scale(tables, cascade, scale, win_w, win_h, s_step, img.width, img.height)
        for x, y, m in zip(xs.tolist(), ys.tolist(), margin.tolist()):
            hits.append((Window(x, y, x + win_w, y + win_h), m))
        scale *= scale_factor
    return hits


def _iou(a: Window, b: Window) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def group_hits(
    hits: list[tuple[Window, float]], min_neighbors: int = 2, overlap: float = 0.5
) -> list[tuple[BoundingBox, float, int]]:
    """Merge raw hits linked by IoU >= ``overlap``; groups need more than
    ``min_neighbors`` members. Returns (mean box, summed margin, size)."""
    n = len(hits)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _iou(hits[i][0], hits[j][0]) >= overlap:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    merged = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) <= min_neighbors:
            continue
        boxes = np.array([[hits[i][0].x_min, hits[i][0].y_min, hits[i][0].x_max, hits[i][0].y_max] for i in members])
        mean = boxes.mean(axis=0)
        score = float(sum(hits[i][1] for i in members))
        merged.append((BoundingBox(*(float(v) for v in mean)), score, len(members)))
    return merged


def detect_cascade(
    img: Image,
    cascade: Cascade,
    scale_factor: float = 1.25,
    step: int = 2,
    min_neighbors: int = 2,
    frame_id: str = "",
) -> list[Detection]:
    hits = scan_windows(img, cascade, scale_factor, step)
    groups = group_hits(hits, min_neighbors)
    logger.debug("%s: %d raw hits, %d groups", cascade.class_name, len(hits), len(groups))
    return [Detection(frame_id, cascade.class_name, box, score) for box, score, _ in groups]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _resize(patch: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return cv2.resize(patch, size, interpolation=cv2.INTER_AREA)


def mine_negatives(
    pool: list[Image], cascade: Cascade, count: int, rng: np.random.Generator, cfg: BoostConfig
) -> np.ndarray:
    """Windows from object-free images that the current cascade still accepts,
    resampled to the base size."""
    w0, h0 = cascade.window
    candidates: list[tuple[int, Window]] = []
    for i, img in enumerate(pool):
        if cascade.stages:
            hits = scan_windows(img, cascade, cfg.scan_scale, cfg.scan_step)
            candidates.extend((i, win) for win, _ in hits)
        else:
            scale = 1.0
            while w0 * scale <= img.width and h0 * scale <= img.height:
                ww, wh = int(w0 * scale), int(h0 * scale)
                s_step = max(1, int(round(cfg.scan_step * 4 * scale)))
                for y in range(0, img.height - wh + 1, s_step):
                    for x in range(0, img.width - ww + 1, s_step):
                        candidates.append((i, Window(x, y, x + ww, y + wh)))
                scale *= cfg.scan_scale
    if not candidates:
        return np.zeros((0, h0, w0), dtype=np.uint8)
    pick = rng.choice(len(candidates), min(count, len(candidates)), replace=False)
    out = np.empty((len(pick), h0, w0), dtype=np.uint8)
    for row, k in enumerate(np.sort(pick)):
        i, win = candidates[k]
        crop = pool[i].data[win.y_min:win.y_max, win.x_min:win.x_max]
        out[row] = crop if crop.shape == (h0, w0) else _resize(crop, (w0, h0))
    return out


def train_cascade(
    positives: np.ndarray,
    negative_pool: list[Image],
    cfg: BoostConfig | None = None,
    class_name: str = "object",
    features: list[HaarFeature] | None = None,
) -> Cascade:
    """Stages trained on surviving positives and freshly mined false positives.

    Stops at ``max_stages``, when no negatives survive, or when a stage cannot
    be trained.
    """
    cfg = cfg or BoostConfig()
    positives = np.asarray(positives, dtype=np.uint8)
    if positives.ndim != 3 or positives.shape[1:] != (BASE_SIZE, BASE_SIZE):
        raise TrainingError(f"Positives must be {BASE_SIZE}x{BASE_SIZE} patches, got {positives.shape}")
    features = features if features is not None else feature_pool(stride=cfg.feature_stride, size_step=cfg.feature_size_step)
    coeffs = coefficient_matrix(features)
    rng = np.random.default_rng(cfg.seed)
    cascade = Cascade([], (BASE_SIZE, BASE_SIZE), class_name)
    pos_resp = patch_responses(positives, coeffs)
    for index in range(cfg.max_stages):
        alive = cascade.classify_patches(positives)
        if not alive.any():
            logger.warning("%s: no positives survive stage %d", class_name, index)
            break
        negatives = mine_negatives(negative_pool, cascade, cfg.negatives_per_stage, rng, cfg)
        if len(negatives) == 0:
            logger.warning("%s: negatives exhausted after %d stages", class_name, index)
            break
        try:
            stage = train_stage_responses(pos_resp[alive], patch_responses(negatives, coeffs), features, cfg)
        except TrainingError as exc:
            logger.warning("%s: stopping at stage %d: %s", class_name, index, exc)
            break
        cascade.stages.append(stage)
    logger.info(
        "%s cascade: %d stages, cumulative d=%.3f f=%.2e",
        class_name, len(cascade.stages), cascade.cumulative_detection, cascade.cumulative_fp,
    )
    return cascade


def synth_views(img: Image, n: int, seed: int = 0) -> list[Image]:
    """Perturbed copies: rotation up to 15 degrees, scale 0.9-1.1, shear up to
    0.1, then contrast and brightness jitter."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    src = img.data.astype(np.float64)
    center = (np.array(src.shape, dtype=np.float64) - 1.0) / 2.0
    mean = src.mean()
    views = []
    while len(views) < n:
        theta = np.radians(rng.uniform(-15.0, 15.0))
        scale = rng.uniform(0.9, 1.1)
        shear = rng.uniform(-0.1, 0.1)
        contrast = rng.uniform(0.85, 1.15)
        brightness = rng.uniform(0.92, 1.08)
        # forward map in (row, col) order
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        forward = scale * rot @ np.array([[1.0, 0.0], [shear, 1.0]])
        inverse = np.linalg.inv(forward)
        warped = ndimage.affine_transform(src, inverse, offset=center - inverse @ center, order=1, mode="reflect")
        out = np.clip((warped - mean) * contrast + mean * brightness, 0, 255)
        view = np.rint(out).astype(np.uint8)
        if np.array_equal(view, img.data):
            continue
        views.append(Image(view))
    return views


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def cascade_to_dict(cascade: Cascade) -> dict:
    return {
        "class_name": cascade.class_name,
        "window": list(cascade.window),
        "stages": [
            {
                "threshold": s.threshold,
                "detection_rate": s.detection_rate,
                "fp_rate": s.fp_rate,
                "stumps": [
                    {
                        "kind": st.feature.kind.value,
                        "x": st.feature.x,
                        "y": st.feature.y,
                        "cell_w": st.feature.cell_w,
                        "cell_h": st.feature.cell_h,
                        "threshold": st.threshold,
                        "polarity": st.polarity,
                        "alpha": st.alpha,
                        "error": st.error,
                    }
                    for st in s.stumps
                ],
            }
            for s in cascade.stages
        ],
    }


def cascade_from_dict(data: dict) -> Cascade:
    stages = []
    for s in data["stages"]:
        stumps = [
            Stump(
                HaarFeature(HaarKind(st["kind"]), int(st["x"]), int(st["y"]), int(st["cell_w"]), int(st["cell_h"])),
                float(st["threshold"]),
                int(st["polarity"]),
                float(st["alpha"]),
                float(st.get("error", 0.0)),
            )
            for st in s["stumps"]
        ]
        stages.append(Stage(stumps, float(s["threshold"]), float(s["detection_rate"]), float(s["fp_rate"])))
    w, h = data["window"]
    return Cascade(stages, (int(w), int(h)), data["class_name"])


def save_cascades(cascades: list[Cascade], path: str | Path) -> None:
    payload = {
        "format": CASCADE_FORMAT,
        "version": CASCADE_FORMAT_VERSION,
        "cascades": [cascade_to_dict(c) for c in cascades],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    logger.info("Wrote %d cascades to %s", len(cascades), path)


def load_cascades(path: str | Path) -> list[Cascade]:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"Cascade file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ModelFileError(f"Cannot read cascade file {path}: {exc}") from exc
    if payload.get("format") != CASCADE_FORMAT or payload.get("version") != CASCADE_FORMAT_VERSION:
        raise ModelFileError(f"{path} is not a v{CASCADE_FORMAT_VERSION} cascade file")
    try:
        return [cascade_from_dict(c) for c in payload["cascades"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"Malformed cascade in {path}: {exc}") from exc


@dataclass(frozen=True)
class ScanConfig:
    scale_factor: float = 1.25
    step: int = 2
    min_neighbors: int = 2

    def __post_init__(self) -> None:
        if self.scale_factor <= 1.0 or self.step < 1 or self.min_neighbors < 0:
            raise ConfigError("scale_factor must be > 1, step >= 1, min_neighbors >= 0")


class CascadeDetector:
    """One cascade per class, scanned independently over each frame."""

    def __init__(self, cascades: list[Cascade], scan: ScanConfig | None = None) -> None:
        if not cascades:
            raise ConfigError("CascadeDetector needs at least one cascade")
        self.cascades = cascades
        self.scan = scan or ScanConfig()

    def detect(self, img: Image, frame_id: str = "") -> list[Detection]:
        s = self.scan
        out = []
        for cascade in self.cascades:
            out.extend(detect_cascade(img, cascade, s.scale_factor, s.step, s.min_neighbors, frame_id))
        return out
