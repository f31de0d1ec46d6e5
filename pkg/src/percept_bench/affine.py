"""2-D affine transforms with least-squares, IRLS and RANSAC estimators."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import RefinementFailed, SingularTransformError

logger = logging.getLogger(__name__)

MIN_DET = 1e-9
MAD_SCALE = 1.4826
TUKEY_C = 4.685
# floor on the robust residual scale, in pixels
MIN_SIGMA = 0.5
L1_WARM_ITERS = 10
# smallest consensus set that says more than the minimal sample itself
MIN_CONSENSUS = 4


@dataclass(frozen=True)
class AffineTransform:
    """Maps model (x, y) to image ``(a x + b y + tx, c x + d y + ty)``."""

    a: float
    b: float
    c: float
    d: float
    tx: float
    ty: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.params)):
            raise SingularTransformError(f"Non-finite affine parameters {self.params}")
        if abs(self.det) <= MIN_DET:
            raise SingularTransformError(f"Affine linear part is singular (det={self.det:.3g})")

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @classmethod
    def similarity(cls, scale: float, theta: float, tx: float, ty: float) -> AffineTransform:
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        return cls(scale * cos_t, -scale * sin_t, scale * sin_t, scale * cos_t, tx, ty)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> AffineTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(*(float(v) for v in (m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.tx, self.ty], dtype=np.float64)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b, self.tx], [self.c, self.d, self.ty]], dtype=np.float64)

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    @property
    def sx(self) -> float:
        return float(np.hypot(self.a, self.c))

    @property
    def sy(self) -> float:
        return float(np.hypot(self.b, self.d))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]


def _check_rank(src: np.ndarray) -> None:
    centred = src - src.mean(axis=0)
    if len(src) < 3 or np.linalg.matrix_rank(centred, tol=1e-6 * max(1.0, np.abs(centred).max())) < 2:
        raise SingularTransformError("Model points are collinear or too few for an affine fit")


def fit_affine_least_squares(
    src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None
) -> AffineTransform:
    """Least-squares affine fit, optionally weighted. Exact at three points."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        keep = weights > 0
        src, dst, weights = src[keep], dst[keep], weights[keep]
    _check_rank(src)
    design = np.column_stack([src, np.ones(len(src))])
    if weights is not None:
        root = np.sqrt(weights)[:, None]
        design, target = design * root, dst * root
    else:
        target = dst
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    return AffineTransform.from_matrix(sol.T)


def residuals(t: AffineTransform, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(t.apply(src) - np.asarray(dst, dtype=np.float64), axis=1)


def _tukey_weights(r: np.ndarray, c: float) -> np.ndarray:
    u = r / c
    return np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)


def _tukey_rho(r: np.ndarray, c: float) -> float:
    u = np.minimum(r / c, 1.0)
    return float(np.sum(c * c / 6.0 * (1.0 - (1.0 - u * u) ** 3)))


@dataclass(eq=False)
class IRLSResult:
    transform: AffineTransform
    weights: np.ndarray
    inliers: np.ndarray
    sigma: float
    iterations: int
    trace: list[float] = field(default_factory=list)


def irls_affine(
    src: np.ndarray, dst: np.ndarray, max_iters: int = 20, tol: float = 1e-3
) -> IRLSResult:
    """Robust affine fit by iteratively reweighted least squares.

    An L1 pass seeds the estimate, then Tukey bisquare weights with the scale
    frozen at 1.4826 x median residual (at least 0.5 px) are iterated until
    the projected points move less than ``tol`` pixels.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    t = fit_affine_least_squares(src, dst)
    if n == 3:
        return IRLSResult(t, np.ones(3), np.ones(3, dtype=bool), MIN_SIGMA, 0, [0.0])

    for _ in range(L1_WARM_ITERS):
        r = residuals(t, src, dst)
        try:
            t = fit_affine_least_squares(src, dst, 1.0 / np.maximum(r, 1e-6))
        except SingularTransformError:
            break

    r = residuals(t, src, dst)
    sigma = max(MAD_SCALE * float(np.median(r)), MIN_SIGMA)
    c = TUKEY_C * sigma
    trace = [_tukey_rho(r, c)]
    weights = _tukey_weights(r, c)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        if np.count_nonzero(weights) < 3:
            raise RefinementFailed(f"Only {np.count_nonzero(weights)} correspondences kept non-zero weight")
        try:
            new_t = fit_affine_least_squares(src, dst, weights)
        except SingularTransformError as exc:
            raise RefinementFailed(f"Weighted fit degenerated: {exc}") from exc
        shift = float(np.max(np.linalg.norm(new_t.apply(src) - t.apply(src), axis=1)))
        t = new_t
        r = residuals(t, src, dst)
        trace.append(_tukey_rho(r, c))
        weights = _tukey_weights(r, c)
        if shift < tol:
            break
    inliers = weights > 0
    if np.count_nonzero(inliers) < 3:
        raise RefinementFailed("Fewer than three inliers after reweighting")
    logger.debug("IRLS converged after %d iterations, sigma=%.3f", iterations, sigma)
    return IRLSResult(t, weights, inliers, sigma, iterations, trace)


def _collinear(pts: np.ndarray) -> bool:
    v1, v2 = pts[1] - pts[0], pts[2] - pts[0]
    area = abs(v1[0] * v2[1] - v1[1] * v2[0])
    return area <= 1e-6 * max(1.0, float(np.abs(pts).max())) ** 2


def ransac_affine(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_px: float = 3.0,
    iters: int = 200,
    rng: np.random.Generator | None = None,
    min_inliers: int = MIN_CONSENSUS,
) -> tuple[AffineTransform | None, np.ndarray]:
    """Best three-point model by inlier count, refit on its consensus set.

    The three sample points always fit their own model exactly, so a model is
    only accepted when at least ``min_inliers`` (never fewer than four)
    correspondences agree with it. Returns ``(None, mask)`` otherwise.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    rng = rng or np.random.default_rng(0)
    n = len(src)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    for _ in range(iters):
        sample = rng.choice(n, 3, replace=False)
        if _collinear(src[sample]) or _collinear(dst[sample]):
            continue
        try:
            t = fit_affine_least_squares(src[sample], dst[sample])
        except SingularTransformError:
            continue
        mask = residuals(t, src, dst) < inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_count < max(min_inliers, MIN_CONSENSUS):
        return None, best_mask
    try:
        refit = fit_affine_least_squares(src[best_mask], dst[best_mask])
    except SingularTransformError:
        return None, best_mask
    return refit, best_mask
