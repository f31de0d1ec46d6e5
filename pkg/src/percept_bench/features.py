"""Difference-of-Gaussians keypoints and 128-bin orientation descriptors."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ImageFormatError, UnsupportedDetectorError
from .imaging import Image

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
MIN_IMAGE_SIDE = 32

_GRID = 4
_ORI_BINS = 8
_HIST_BINS = 36
_BORDER = 5
_MAX_INTERP_STEPS = 5
_PEAK_RATIO = 0.8
_CLAMP = 0.2
_LOW_ENERGY = 1e-8
# assumed blur of the input raster
_CAMERA_SIGMA = 0.5


@dataclass(frozen=True)
class ScaleSpaceConfig:
    """DoG pyramid parameters. ``octaves=None`` uses every octave whose
    shorter side is still at least 16 px."""

    octaves: int | None = None
    scales_per_octave: int = 3
    initial_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    upsample: bool = True
    detector: str = "dog"

    def __post_init__(self) -> None:
        if self.octaves is not None and self.octaves < 1:
            raise ConfigError(f"octaves must be >= 1, got {self.octaves}")
        if self.scales_per_octave < 2:
            raise ConfigError(f"scales_per_octave must be >= 2, got {self.scales_per_octave}")
        if self.initial_sigma <= 0 or self.contrast_threshold <= 0 or self.edge_ratio_threshold <= 0:
            raise ConfigError("sigma and thresholds must be positive")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float = 0.0
    octave: int = 0


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    border_reflected: bool = False
    low_contrast: bool = False


@dataclass(eq=False)
class FeatureSet:
    """Keypoints with their descriptor matrix (float32, one row each)."""

    keypoints: list[Keypoint]
    descriptors: np.ndarray
    border_reflected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    low_contrast: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        n = len(self.keypoints)
        if self.descriptors.shape != (n, DESCRIPTOR_DIM):
            self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(n, DESCRIPTOR_DIM)
        if self.border_reflected.shape != (n,):
            self.border_reflected = np.zeros(n, dtype=bool)
        if self.low_contrast.shape != (n,):
            self.low_contrast = np.zeros(n, dtype=bool)

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def empty(cls) -> FeatureSet:
        return cls([], np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32))

    def positions(self) -> np.ndarray:
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    def subset(self, indices: np.ndarray | list[int]) -> FeatureSet:
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            [self.keypoints[i] for i in idx],
            self.descriptors[idx],
            self.border_reflected[idx],
            self.low_contrast[idx],
        )


# ---------------------------------------------------------------------------
# Scale space
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Octave:
    gaussians: list[np.ndarray]
    dog: np.ndarray
    # gradient magnitude / angle per gaussian level, filled lazily
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def gradient(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        if level not in self.grads:
            g = self.gaussians[level]
            dx = np.zeros_like(g)
            dy = np.zeros_like(g)
            dx[:, 1:-1] = g[:, 2:] - g[:, :-2]
            dy[1:-1, :] = g[2:, :] - g[:-2, :]
            mag = np.hypot(dx, dy)
            ang = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
            self.grads[level] = (mag, ang)
        return self.grads[level]


@dataclass(eq=False)
class _Pyramid:
    octaves: list[_Octave]
    cfg: ScaleSpaceConfig

    @property
    def base_factor(self) -> float:
        """Original-image pixels per base-octave pixel."""
        return 0.5 if self.cfg.upsample else 1.0

    def locate(self, scale: float) -> tuple[int, int, float]:
        """Octave, gaussian level and octave-relative sigma for an image-space scale."""
        s = self.cfg.scales_per_octave
        sigma_base = scale / self.base_factor
        rel = np.log2(max(sigma_base, 1e-12) / self.cfg.initial_sigma)
        octave = int(np.clip(np.floor(rel), 0, len(self.octaves) - 1))
        sigma_oct = sigma_base / (2.0 ** octave)
        level = int(np.clip(np.rint(s * np.log2(sigma_oct / self.cfg.initial_sigma)), 0, s + 1))
        return octave, level, sigma_oct


def _upsample(base: np.ndarray) -> np.ndarray:
    """Align-corners 2x linear upsampling (n -> 2n - 1)."""
    h, w = base.shape
    out = np.empty((2 * h - 1, 2 * w - 1), dtype=np.float64)
    out[::2, ::2] = base
    out[1::2, ::2] = 0.5 * (base[:-1, :] + base[1:, :])
    out[::2, 1::2] = 0.5 * (base[:, :-1] + base[:, 1:])
    out[1::2, 1::2] = 0.25 * (base[:-1, :-1] + base[1:, :-1] + base[:-1, 1:] + base[1:, 1:])
    return out


def _build_pyramid(img: Image, cfg: ScaleSpaceConfig) -> _Pyramid:
    base = img.as_float()
    assumed = _CAMERA_SIGMA
    if cfg.upsample:
        base = _upsample(base)
        assumed *= 2.0
    diff = np.sqrt(max(cfg.initial_sigma ** 2 - assumed ** 2, 0.01))
    base = ndimage.gaussian_filter(base, diff, mode="reflect")

    s = cfg.scales_per_octave
    k = 2.0 ** (1.0 / s)
    increments = [0.0]
    for i in range(1, s + 3):
        prev = cfg.initial_sigma * k ** (i - 1)
        increments.append(np.sqrt((prev * k) ** 2 - prev ** 2))

    octaves: list[_Octave] = []
    current = base
    while min(current.shape) >= 16:
        if cfg.octaves is not None and len(octaves) >= cfg.octaves:
            break
        gaussians = [current]
        for i in range(1, s + 3):
            gaussians.append(ndimage.gaussian_filter(gaussians[-1], increments[i], mode="reflect"))
        stack = np.stack(gaussians)
        octaves.append(_Octave(gaussians=gaussians, dog=stack[1:] - stack[:-1]))
        current = gaussians[s][::2, ::2]
    return _Pyramid(octaves=octaves, cfg=cfg)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _derivatives(dog: np.ndarray, l: int, r: int, c: int) -> tuple[np.ndarray, np.ndarray]:
    d = dog
    g = 0.5 * np.array([
        d[l, r, c + 1] - d[l, r, c - 1],
        d[l, r + 1, c] - d[l, r - 1, c],
        d[l + 1, r, c] - d[l - 1, r, c],
    ])
    v2 = 2.0 * d[l, r, c]
    dxx = d[l, r, c + 1] + d[l, r, c - 1] - v2
    dyy = d[l, r + 1, c] + d[l, r - 1, c] - v2
    dss = d[l + 1, r, c] + d[l - 1, r, c] - v2
    dxy = 0.25 * (d[l, r + 1, c + 1] - d[l, r + 1, c - 1] - d[l, r - 1, c + 1] + d[l, r - 1, c - 1])
    dxs = 0.25 * (d[l + 1, r, c + 1] - d[l + 1, r, c - 1] - d[l - 1, r, c + 1] + d[l - 1, r, c - 1])
    dys = 0.25 * (d[l + 1, r + 1, c] - d[l + 1, r - 1, c] - d[l - 1, r + 1, c] + d[l - 1, r - 1, c])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, hess


def _localize(
    dog: np.ndarray, l: int, r: int, c: int, cfg: ScaleSpaceConfig
) -> tuple[int, int, int, np.ndarray, float] | None:
    """Quadratic refinement; returns integer position, offset (x, y, s) and D(x_hat)."""
    s = cfg.scales_per_octave
    h, w = dog.shape[1:]
    for _ in range(_MAX_INTERP_STEPS):
        g, hess = _derivatives(dog, l, r, c)
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            break
        c += int(np.rint(offset[0]))
        r += int(np.rint(offset[1]))
        l += int(np.rint(offset[2]))
        if not (1 <= l <= s and _BORDER <= r < h - _BORDER and _BORDER <= c < w - _BORDER):
            return None
    else:
        return None
    value = float(dog[l, r, c] + 0.5 * g @ offset)
    if abs(value) < cfg.contrast_threshold:
        return None
    dxx, dyy, dxy = hess[0, 0], hess[1, 1], hess[0, 1]
    trace = dxx + dyy
    det = dxx * dyy - dxy * dxy
    ratio = cfg.edge_ratio_threshold
    if det <= 0 or trace * trace * ratio >= (ratio + 1.0) ** 2 * det:
        return None
    return l, r, c, offset, value


def _orientations(octave: _Octave, level: int, x: float, y: float, sigma_oct: float) -> list[float]:
    """Dominant gradient directions around (x, y) in octave coordinates."""
    mag, ang = octave.gradient(level)
    h, w = mag.shape
    sigma = 1.5 * sigma_oct
    radius = int(np.rint(3.0 * sigma))
    cx, cy = int(np.rint(x)), int(np.rint(y))
    y0, y1 = max(cy - radius, 1), min(cy + radius, h - 2)
    x0, x1 = max(cx - radius, 1), min(cx + radius, w - 2)
    if y0 > y1 or x0 > x1:
        return []
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    weight = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma * sigma))
    m = mag[y0:y1 + 1, x0:x1 + 1] * weight
    bins = np.floor(ang[y0:y1 + 1, x0:x1 + 1] * _HIST_BINS / (2.0 * np.pi)).astype(np.int64) % _HIST_BINS
    hist = np.bincount(bins.ravel(), weights=m.ravel(), minlength=_HIST_BINS)
    for _ in range(2):
        hist = 0.25 * np.roll(hist, 1) + 0.5 * hist + 0.25 * np.roll(hist, -1)
    peak = hist.max()
    if peak <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    angles = []
    for b in np.flatnonzero((hist > left) & (hist > right) & (hist >= _PEAK_RATIO * peak)):
        denom = left[b] - 2.0 * hist[b] + right[b]
        shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
        angles.append(float(np.mod((b + 0.5 + shift) * 2.0 * np.pi / _HIST_BINS, 2.0 * np.pi)))
    return angles


def _detect(pyr: _Pyramid) -> list[Keypoint]:
    cfg = pyr.cfg
    s = cfg.scales_per_octave
    pre = 0.5 * cfg.contrast_threshold
    keypoints: list[Keypoint] = []
    for o, octave in enumerate(pyr.octaves):
        dog = octave.dog
        h, w = dog.shape[1:]
        if h <= 2 * _BORDER or w <= 2 * _BORDER:
            continue
        maxf = ndimage.maximum_filter(dog, size=3, mode="nearest")
        minf = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == maxf) & (dog > pre)) | ((dog == minf) & (dog < -pre))
        cand[0] = cand[-1] = False
        cand[:, :_BORDER, :] = cand[:, h - _BORDER:, :] = False
        cand[:, :, :_BORDER] = cand[:, :, w - _BORDER:] = False

        seen: set[tuple[int, int, int]] = set()
        octave_scale = (2.0 ** o) * pyr.base_factor
        for l, r, c in np.argwhere(cand):
            found = _localize(dog, int(l), int(r), int(c), cfg)
            if found is None:
                continue
            l2, r2, c2, offset, value = found
            if (l2, r2, c2) in seen:
                continue
            seen.add((l2, r2, c2))
            xo, yo = c2 + offset[0], r2 + offset[1]
            sigma_oct = cfg.initial_sigma * 2.0 ** ((l2 + offset[2]) / s)
            for theta in _orientations(octave, l2, xo, yo, sigma_oct):
                keypoints.append(Keypoint(
                    x=float(xo * octave_scale),
                    y=float(yo * octave_scale),
                    scale=float(sigma_oct * octave_scale),
                    orientation=theta,
                    response=abs(value),
                    octave=o,
                ))
    return keypoints


def _too_small(img: Image) -> bool:
    if img.width < MIN_IMAGE_SIDE or img.height < MIN_IMAGE_SIDE:
        logger.warning(
            "Image %dx%d below %d px minimum, no keypoints", img.width, img.height, MIN_IMAGE_SIDE
        )
        return True
    return False


def detect_keypoints(img: Image, cfg: ScaleSpaceConfig | None = None) -> list[Keypoint]:
    """DoG extrema that survive the contrast and edge tests, one entry per
    dominant orientation."""
    cfg = cfg or ScaleSpaceConfig()
    if _too_small(img):
        return []
    keypoints = _detect(_build_pyramid(img, cfg))
    logger.debug("Detected %d keypoints on %dx%d image", len(keypoints), img.width, img.height)
    return keypoints


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.abs(idx)
    idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    return np.clip(idx, 0, n - 1)


def _describe(pyr: _Pyramid, kp: Keypoint) -> Descriptor:
    o, level, sigma_oct = pyr.locate(kp.scale)
    octave = pyr.octaves[o]
    mag, ang = octave.gradient(level)
    h, w = mag.shape
    octave_scale = (2.0 ** o) * pyr.base_factor
    x, y = kp.x / octave_scale, kp.y / octave_scale

    hw = 3.0 * sigma_oct
    radius = int(np.ceil(hw * np.sqrt(2.0) * (_GRID + 1) / 2.0))
    cx, cy = int(np.rint(x)), int(np.rint(y))
    offs = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(offs + cy, offs + cx, indexing="ij")
    rel_x = xx - x
    rel_y = yy - y
    cos_t, sin_t = np.cos(kp.orientation), np.sin(kp.orientation)
    u = (cos_t * rel_x + sin_t * rel_y) / hw
    v = (-sin_t * rel_x + cos_t * rel_y) / hw
    ub = u + _GRID / 2.0 - 0.5
    vb = v + _GRID / 2.0 - 0.5
    inside = (ub > -1.0) & (ub < _GRID) & (vb > -1.0) & (vb < _GRID)

    rows, cols = yy[inside], xx[inside]
    reflected = bool((rows < 0).any() or (rows >= h).any() or (cols < 0).any() or (cols >= w).any())
    rows, cols = _reflect(rows, h), _reflect(cols, w)
    ub, vb = ub[inside], vb[inside]
    weight = np.exp(-2.0 * (u[inside] ** 2 + v[inside] ** 2) / (_GRID * _GRID))
    m = mag[rows, cols] * weight
    ob = np.mod(ang[rows, cols] - kp.orientation, 2.0 * np.pi) * _ORI_BINS / (2.0 * np.pi)

    u0, v0, o0 = np.floor(ub), np.floor(vb), np.floor(ob)
    fu, fv, fo = ub - u0, vb - v0, ob - o0
    u0, v0, o0 = u0.astype(np.int64), v0.astype(np.int64), o0.astype(np.int64)
    hist = np.zeros((_GRID + 2, _GRID + 2, _ORI_BINS), dtype=np.float64)
    for dv in (0, 1):
        wv = fv if dv else 1.0 - fv
        for du in (0, 1):
            wu = fu if du else 1.0 - fu
            for do in (0, 1):
                wo = fo if do else 1.0 - fo
                np.add.at(
                    hist,
                    (v0 + dv + 1, u0 + du + 1, (o0 + do) % _ORI_BINS),
                    m * wv * wu * wo,
                )
    vec = hist[1:_GRID + 1, 1:_GRID + 1, :].ravel()
    energy = float(np.linalg.norm(vec))
    if energy < _LOW_ENERGY:
        return Descriptor(np.full(DESCRIPTOR_DIM, 1.0 / np.sqrt(DESCRIPTOR_DIM)), reflected, True)
    vec = np.minimum(vec / energy, _CLAMP)
    vec /= np.linalg.norm(vec)
    return Descriptor(vec, reflected, False)


def compute_descriptors(
    img: Image, kps: list[Keypoint], cfg: ScaleSpaceConfig | None = None
) -> list[Descriptor]:
    cfg = cfg or ScaleSpaceConfig()
    if not kps:
        return []
    pyr = _build_pyramid(img, cfg)
    if not pyr.octaves:
        raise ImageFormatError(f"Image {img.width}x{img.height} too small for a pyramid")
    return [_describe(pyr, kp) for kp in kps]


def extract_features(img: Image, cfg: ScaleSpaceConfig | None = None) -> FeatureSet:
    """Detect and describe with one shared pyramid."""
    cfg = cfg or ScaleSpaceConfig()
    get_detector(cfg.detector)
    if _too_small(img):
        return FeatureSet.empty()
    pyr = _build_pyramid(img, cfg)
    keypoints = _detect(pyr)
    if not keypoints:
        return FeatureSet.empty()
    descs = [_describe(pyr, kp) for kp in keypoints]
    return FeatureSet(
        keypoints,
        np.stack([d.values for d in descs]).astype(np.float32),
        np.array([d.border_reflected for d in descs], dtype=bool),
        np.array([d.low_contrast for d in descs], dtype=bool),
    )


DETECTORS: dict[str, Callable[[Image, ScaleSpaceConfig | None], list[Keypoint]]] = {
    "dog": detect_keypoints,
}

# Detector names that configurations may mention but that have no implementation.
UNBUILT_DETECTORS = frozenset({"surf", "heslap", "hesaff"})


def get_detector(name: str) -> Callable[[Image, ScaleSpaceConfig | None], list[Keypoint]]:
    try:
        return DETECTORS[name]
    except KeyError:
        if name in UNBUILT_DETECTORS:
            raise UnsupportedDetectorError(f"Detector {name!r} is declared but not implemented") from None
        raise UnsupportedDetectorError(f"Unknown detector {name!r}") from None


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"PBFT"
_DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIII")


def write_features(features: FeatureSet, path: str | Path) -> None:
    """Binary dump: little-endian header (magic, version, count, dim), then
    per keypoint float32 x, y, scale, orientation and the descriptor."""
    n = len(features)
    records = np.zeros((n, 4 + DESCRIPTOR_DIM), dtype="<f4")
    for i, kp in enumerate(features.keypoints):
        records[i, :4] = (kp.x, kp.y, kp.scale, kp.orientation)
    records[:, 4:] = features.descriptors
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(_DUMP_MAGIC, _DUMP_VERSION, n, DESCRIPTOR_DIM))
        fh.write(records.tobytes())


def read_features(path: str | Path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise ImageFormatError(f"{path}: truncated feature dump")
    magic, version, n, dim = _DUMP_HEADER.unpack_from(raw)
    if magic != _DUMP_MAGIC or version != _DUMP_VERSION or dim != DESCRIPTOR_DIM:
        raise ImageFormatError(f"{path}: not a version {_DUMP_VERSION} feature dump")
    expected = n * (4 + dim) * 4
    body = raw[_DUMP_HEADER.size:]
    if len(body) != expected:
        raise ImageFormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    records = np.frombuffer(body, dtype="<f4").reshape(n, 4 + dim)
    keypoints = [Keypoint(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in records]
    return FeatureSet(keypoints, records[:, 4:].astype(np.float32))


def export_features_text(features: FeatureSet, path: str | Path) -> None:
    lines = []
    for kp, desc in zip(features.keypoints, features.descriptors):
        values = " ".join(f"{v:.6f}" for v in desc)
        lines.append(f"{kp.x:.3f} {kp.y:.3f} {kp.scale:.4f} {kp.orientation:.5f} {values}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
