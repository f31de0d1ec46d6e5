"""Grayscale rasters, integral images, boxes and the overlap criteria."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import BoundsError, GeometryError, ImageFormatError

logger = logging.getLogger(__name__)

# Rec. 601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_luminance(pixels: np.ndarray) -> np.ndarray:
    """Convert an HxWx3 (or HxWx4) array to 8-bit luminance."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ImageFormatError(f"Unsupported pixel array shape {arr.shape}")
    luma = arr[..., 0] * LUMA_WEIGHTS[0] + arr[..., 1] * LUMA_WEIGHTS[1] + arr[..., 2] * LUMA_WEIGHTS[2]
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major 8-bit luminance raster.

    ``data`` has shape ``(height, width)`` and is read-only once constructed.
    """

    data: np.ndarray
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            arr = to_luminance(arr)
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr.astype(np.float64)), 0, 255).astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        height, width = arr.shape
        if width <= 0 or height <= 0:
            raise GeometryError(f"Image must be non-empty, got {width}x{height}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))

    @classmethod
    def blank(cls, width: int, height: int, value: int = 0) -> Image:
        return cls(np.full((height, width), value, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def as_float(self) -> np.ndarray:
        """Floating-point view in [0, 1] used by the filtering code."""
        return self.data.astype(np.float64) / 255.0

    def crop(self, window: Window) -> Image:
        _check_window(window, self.width, self.height)
        return Image(self.data[window.y_min:window.y_max, window.x_min:window.x_max])


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, origin top-left, inclusive-exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"Degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def intersection_area(self, other: BoundingBox) -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def union_area(self, other: BoundingBox) -> float:
        return self.area + other.area - self.intersection_area(other)

    def contains(self, other: BoundingBox) -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def clip(self, width: int, height: int) -> BoundingBox | None:
        """Clip to ``[0, width) x [0, height)``; None when nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def to_window(self) -> Window:
        """Round outward to the enclosing integer window."""
        return Window(
            int(np.floor(self.x_min)),
            int(np.floor(self.y_min)),
            int(np.ceil(self.x_max)),
            int(np.ceil(self.y_max)),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Window:
    """Integer sub-window with the corner references of a summed-area lookup.

    Corners are integral-image coordinates: ``top_left`` = (x_min, y_min),
    ``bottom_right`` = (x_max, y_max).
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"Window must have positive area: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max))

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def top_left(self) -> tuple[int, int]:
        return (self.x_min, self.y_min)

    @property
    def top_right(self) -> tuple[int, int]:
        return (self.x_max, self.y_min)

    @property
    def bottom_left(self) -> tuple[int, int]:
        return (self.x_min, self.y_max)

    @property
    def bottom_right(self) -> tuple[int, int]:
        return (self.x_max, self.y_max)

    def inside(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def _check_window(window: Window, width: int, height: int) -> None:
    if not window.inside(width, height):
        raise BoundsError(f"Window {window} outside {width}x{height} image")


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Summed-area table of shape ``(height + 1, width + 1)``.

    ``table[y, x]`` is S(x, y), the sum of all values in [0, x) x [0, y).
    """

    table: np.ndarray

    def __post_init__(self) -> None:
        self.table.flags.writeable = False

    @classmethod
    def from_array(cls, values: np.ndarray, dtype: type = np.int64) -> IntegralImage:
        values = np.asarray(values)
        h, w = values.shape
        table = np.zeros((h + 1, w + 1), dtype=dtype)
        np.cumsum(np.cumsum(values, axis=0, dtype=dtype), axis=1, dtype=dtype, out=table[1:, 1:])
        return cls(table)

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    def at(self, x: int, y: int) -> int:
        return int(self.table[y, x])


def integral_build(img: Image, squared: bool = False) -> IntegralImage:
    """Summed-area table of the image pixels (or of their squares)."""
    values = img.data.astype(np.int64)
    if squared:
        values = values * values
    return IntegralImage.from_array(values)


def rect_sum(ii: IntegralImage, w: Window) -> int:
    """Exact sum over ``w`` with four table lookups."""
    _check_window(w, ii.width, ii.height)
    t = ii.table
    return int(t[w.y_max, w.x_max]) + int(t[w.y_min, w.x_min]) - int(t[w.y_min, w.x_max]) - int(t[w.y_max, w.x_min])


def overlap_ratio(gt: BoundingBox, det: BoundingBox, occluded: bool = False) -> float:
    """Pascal overlap (intersection over union), or intersection over the
    ground-truth area when ``occluded`` is set."""
    inter = gt.intersection_area(det)
    if inter <= 0.0:
        return 0.0
    denom = gt.area if occluded else gt.union_area(det)
    return min(1.0, inter / denom)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

# 16-bit greyscale modes Pillow may report for deep PGM/PNG rasters
_WIDE_MODES = ("I", "I;16", "I;16B", "I;16L")


def load_image(path: str | Path) -> Image:
    """Read any raster Pillow decodes (PGM, PNG, JPEG, ...) as 8-bit luminance.

    16-bit greyscale is rescaled to 8 bits; colour goes through the Rec. 601
    weights.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as pil:
            pil.load()
            if pil.mode == "L":
                return Image(np.asarray(pil))
            if pil.mode in _WIDE_MODES:
                wide = np.asarray(pil, dtype=np.float64)
                return Image(np.rint(wide * 255.0 / 65535.0))
            rgb = np.asarray(pil.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"Cannot decode {path}: {exc}") from exc
    return Image(to_luminance(rgb))


def write_pgm(img: Image, path: str | Path) -> None:
    """Binary 8-bit PGM."""
    try:
        PILImage.fromarray(img.data).save(path, format="PPM")
    except OSError as exc:
        raise ImageFormatError(f"Cannot write {path}: {exc}") from exc


def write_label_pgm(labels: np.ndarray, path: str | Path) -> None:
    """Export a label map as a PGM, spreading labels over the 8-bit range."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.uint8)
    positive = labels > 0
    if positive.any():
        # multiplicative hashing keeps neighbouring labels visually distinct
        out[positive] = (labels[positive].astype(np.int64) * 97 % 223 + 32).astype(np.uint8)
    write_pgm(Image(out), path)
