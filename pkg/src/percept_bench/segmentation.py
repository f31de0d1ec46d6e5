"""Region proposals: Canny edges, edge-bounded flood fill, window grids and
stereo depth cells."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .errors import CalibrationError, ConfigError
from .features import FeatureSet
from .imaging import BoundingBox, Image, Window

logger = logging.getLogger(__name__)

_SCAN_CHUNK = 4096
_NEAR_PLANE = 0.1


@dataclass(frozen=True, eq=False)
class EdgeMap:
    edges: np.ndarray
    low: float
    high: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.edges.shape

    @property
    def count(self) -> int:
        return int(self.edges.sum())


@dataclass(frozen=True)
class ProposalConfig:
    tolerance: int = 12
    min_area: int = 900
    multipliers: tuple[float, ...] = (0.75, 1.0, 1.25, 1.5, 2.0)
    canny_low: float = 40.0
    canny_high: float = 100.0
    canny_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ConfigError(f"flood tolerance must be positive, got {self.tolerance}")
        if self.min_area < 1:
            raise ConfigError("min_area must be >= 1")
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ConfigError("window multipliers must be positive")
        if not 0 < self.canny_low < self.canny_high:
            raise ConfigError("Canny thresholds need 0 < low < high")


def canny(img: Image, low: float = 40.0, high: float = 100.0, sigma: float = 1.0) -> EdgeMap:
    """Sobel magnitude, 4-sector non-maximum suppression, 8-connected hysteresis."""
    if not 0 < low < high:
        raise ConfigError(f"Canny thresholds need 0 < low < high, got ({low}, {high})")
    data = img.data.astype(np.float64)
    if sigma > 0:
        data = ndimage.gaussian_filter(data, sigma, mode="nearest")
    gx = ndimage.sobel(data, axis=1, mode="nearest")
    gy = ndimage.sobel(data, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    h, w = mag.shape
    padded = np.pad(mag, 1)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    # (dy, dx) of the neighbour in the gradient direction, per sector
    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    keep = np.zeros_like(mag, dtype=bool)
    for sel, (dy, dx) in sectors:
        ahead = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= sel & (mag > behind) & (mag >= ahead)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False

    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return EdgeMap(np.zeros((h, w), dtype=bool), low, high)
    linked = np.zeros(n + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return EdgeMap(linked[labels], low, high)


@dataclass(frozen=True, eq=False)
class Region:
    """One flood-filled region; ``labels`` is the label map shared by all
    regions of the same call."""

    label: int
    seed: tuple[int, int]
    area: int
    box: BoundingBox
    labels: np.ndarray

    def mask(self) -> np.ndarray:
        return self.labels == self.label


REJECTED = -2
EDGE = -1


def _next_free(flat: np.ndarray, start: int) -> int:
    n = len(flat)
    pos = start
    while pos < n:
        chunk = flat[pos:pos + _SCAN_CHUNK]
        hits = np.flatnonzero(chunk == 0)
        if len(hits):
            return pos + int(hits[0])
        pos += _SCAN_CHUNK
    return -1


def floodcanny(img: Image, edges: EdgeMap, cfg: ProposalConfig | None = None) -> list[Region]:
    """Edge-bounded flood fill seeded at the next unlabelled pixel in raster order.

    A pixel joins the region when it is a 4-neighbour, not an edge, not yet
    labelled and within ``tolerance`` of the seed intensity. Regions smaller
    than ``min_area`` are consumed but not returned.
    """
    cfg = cfg or ProposalConfig()
    if edges.shape != img.shape:
        raise ConfigError(f"Edge map {edges.shape} does not match image {img.shape}")
    h, w = img.shape
    data = np.array(img.data, dtype=np.uint8, copy=True)
    mask = np.zeros((h + 2, w + 2), dtype=np.uint8)
    mask[1:-1, 1:-1][edges.edges] = 1
    labels = np.zeros((h, w), dtype=np.int32)
    labels[edges.edges] = EDGE
    flat = labels.reshape(-1)
    flags = 4 | cv2.FLOODFILL_FIXED_RANGE | cv2.FLOODFILL_MASK_ONLY | (2 << 8)
    tol = float(cfg.tolerance)

    regions: list[Region] = []
    pos = 0
    next_label = 1
    while True:
        pos = _next_free(flat, pos)
        if pos < 0:
            break
        y, x = divmod(pos, w)
        area, _, _, rect = cv2.floodFill(data, mask, (x, y), 0, tol, tol, flags)
        rx, ry, rw, rh = rect
        sub = mask[ry + 1:ry + 1 + rh, rx + 1:rx + 1 + rw]
        filled = sub == 2
        sub[filled] = 1
        if area >= cfg.min_area:
            labels[ry:ry + rh, rx:rx + rw][filled] = next_label
            rows = np.flatnonzero(filled.any(axis=1))
            cols = np.flatnonzero(filled.any(axis=0))
            box = BoundingBox(
                float(rx + cols[0]), float(ry + rows[0]), float(rx + cols[-1] + 1), float(ry + rows[-1] + 1)
            )
            regions.append(Region(next_label, (x, y), int(area), box, labels))
            next_label += 1
        else:
            labels[ry:ry + rh, rx:rx + rw][filled] = REJECTED
    logger.debug("floodcanny: %d regions kept on %dx%d image", len(regions), w, h)
    return regions


def region_windows(
    region: Region, cfg: ProposalConfig | None = None, image_dims: tuple[int, int] | None = None
) -> list[Window]:
    """Windows centred on the region box, one per multiplier, clipped to the image."""
    cfg = cfg or ProposalConfig()
    if image_dims is None:
        height, width = region.labels.shape
    else:
        width, height = image_dims
    cx, cy = region.box.center
    bw, bh = region.box.width, region.box.height
    windows = []
    for m in cfg.multipliers:
        box = BoundingBox(cx - m * bw / 2, cy - m * bh / 2, cx + m * bw / 2, cy + m * bh / 2).clip(width, height)
        if box is not None:
            windows.append(box.to_window())
    return windows


def sliding_windows(
    dims: tuple[int, int],
    step: int,
    scales: tuple[int, ...] | list[int],
    aspect_ratios: tuple[float, ...] | list[float] = (1.0,),
) -> list[Window]:
    """Raster of overlapping windows. ``scales`` are window heights, aspect
    ratios are width / height; windows larger than the image are skipped."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    width, height = dims
    windows = []
    for wh in scales:
        for ar in aspect_ratios:
            ww = int(round(wh * ar))
            if ww < 1 or wh < 1 or ww > width or wh > height:
                continue
            for y in range(0, height - wh + 1, step):
                for x in range(0, width - ww + 1, step):
                    windows.append(Window(x, y, x + ww, y + wh))
    return windows


# ---------------------------------------------------------------------------
# Stereo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StereoMatch:
    left_index: int
    right_index: int
    x: float
    y: float
    disparity: float
    distance: float


def stereo_match(
    left: FeatureSet,
    right: FeatureSet,
    band: float = 2.0,
    scale_ratio: float = 1.5,
    orientation_bound: float = 0.5,
    max_disparity: float | None = None,
) -> list[StereoMatch]:
    """Best-descriptor match per left feature among right features on the same
    rectified row band, with non-negative disparity and compatible scale and
    orientation."""
    if len(left) == 0 or len(right) == 0:
        return []
    rpos = right.positions()
    rscale = np.array([k.scale for k in right.keypoints])
    rori = np.array([k.orientation for k in right.keypoints])
    rdesc = right.descriptors.astype(np.float64)
    matches = []
    for i, kp in enumerate(left.keypoints):
        disp = kp.x - rpos[:, 0]
        ratio = np.maximum(kp.scale / rscale, rscale / kp.scale)
        dori = np.abs(np.angle(np.exp(1j * (rori - kp.orientation))))
        ok = (np.abs(rpos[:, 1] - kp.y) <= band) & (disp >= 0) & (ratio <= scale_ratio) & (dori <= orientation_bound)
        if max_disparity is not None:
            ok &= disp <= max_disparity
        cand = np.flatnonzero(ok)
        if len(cand) == 0:
            continue
        diff = rdesc[cand] - left.descriptors[i].astype(np.float64)
        dist = np.einsum("ij,ij->i", diff, diff)
        j = int(cand[int(np.argmin(dist))])
        matches.append(StereoMatch(i, j, kp.x, kp.y, float(disp[j]), float(np.sqrt(dist.min()))))
    return matches


@dataclass(frozen=True)
class StereoCalibration:
    """Rectified pair: focal length in pixels, baseline in metres, principal point."""

    focal_px: float
    baseline_m: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.focal_px > 0 and self.baseline_m > 0) or not all(
            math.isfinite(v) for v in (self.focal_px, self.baseline_m, self.cx, self.cy)
        ):
            raise CalibrationError(
                f"Degenerate calibration f={self.focal_px} B={self.baseline_m}"
            )

    def triangulate(self, x: np.ndarray, y: np.ndarray, disparity: np.ndarray) -> np.ndarray:
        z = self.focal_px * self.baseline_m / disparity
        return np.column_stack([(x - self.cx) * z / self.focal_px, (y - self.cy) * z / self.focal_px, z])

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        z = np.maximum(pts[:, 2], _NEAR_PLANE)
        return np.column_stack([self.focal_px * pts[:, 0] / z + self.cx, self.focal_px * pts[:, 1] / z + self.cy])


@dataclass(frozen=True)
class CellGrid:
    cell_sizes: tuple[float, ...] = (0.25, 0.5, 1.0)
    min_votes: int = 5

    def __post_init__(self) -> None:
        if not self.cell_sizes or any(s <= 0 for s in self.cell_sizes):
            raise ConfigError("cell sizes must be positive")
        if self.min_votes < 1:
            raise ConfigError("min_votes must be >= 1")


@dataclass(frozen=True)
class DepthProposal:
    window: Window
    cell_size: float
    cell: tuple[int, int, int]
    members: tuple[int, ...]


def depth_grid_proposals(
    matches: list[StereoMatch],
    calib: StereoCalibration,
    grid: CellGrid | None = None,
    image_dims: tuple[int, int] = (640, 480),
) -> list[DepthProposal]:
    """Triangulated matches vote into 3-D cells; busy cells reproject their
    eight corners to a left-image window."""
    grid = grid or CellGrid()
    width, height = image_dims
    usable = [i for i, m in enumerate(matches) if m.disparity > 0]
    if not usable:
        return []
    xs = np.array([matches[i].x for i in usable])
    ys = np.array([matches[i].y for i in usable])
    ds = np.array([matches[i].disparity for i in usable])
    points = calib.triangulate(xs, ys, ds)

    proposals: list[DepthProposal] = []
    seen: set[tuple[int, int, int, int]] = set()
    corners_unit = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    for size in grid.cell_sizes:
        cells = np.floor(points / size).astype(np.int64)
        votes: dict[tuple[int, int, int], list[int]] = {}
        for row, cell in enumerate(map(tuple, cells)):
            votes.setdefault(cell, []).append(usable[row])
        for cell in sorted(votes):
            members = votes[cell]
            if len(members) < grid.min_votes:
                continue
            corners = (np.array(cell, dtype=np.float64) + corners_unit) * size
            uv = calib.project(corners)
            box = BoundingBox(
                float(np.floor(uv[:, 0].min())), float(np.floor(uv[:, 1].min())),
                float(np.ceil(uv[:, 0].max())), float(np.ceil(uv[:, 1].max())),
            ).clip(width, height)
            if box is None:
                continue
            window = box.to_window()
            key = (window.x_min, window.y_min, window.x_max, window.y_max)
            if key in seen:
                continue
            seen.add(key)
            proposals.append(DepthProposal(window, size, cell, tuple(members)))
    logger.debug("Depth grid: %d matches, %d proposals", len(usable), len(proposals))
    return proposals


def words_near_matches(
    positions: np.ndarray, matches: list[StereoMatch], members: tuple[int, ...], radius: float = 20.0
) -> np.ndarray:
    """Features within ``radius`` pixels of any member match in the left image."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if not members or len(pos) == 0:
        return np.zeros(len(pos), dtype=bool)
    anchors = np.array([(matches[i].x, matches[i].y) for i in members])
    d2 = ((pos[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    return (d2 <= radius * radius).any(axis=1)
