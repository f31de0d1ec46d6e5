"""Single-image object models recognised through pose voting and affine verification.

Pipeline per frame: features, ratio-test matches against the pooled model
database, Hough voting over (x, y, orientation, log scale), optional RANSAC
verification, optional IRLS refinement, optional heuristic filtering, and
finally one box per surviving hypothesis from the projected model corners.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import AffineTransform, fit_affine_least_squares, irls_affine, ransac_affine
from .errors import ConfigError, RefinementFailed, SingularTransformError, TrainingError
from .features import FeatureSet, Keypoint, ScaleSpaceConfig, extract_features, get_detector
from .imaging import BoundingBox, Image
from .matching import (
    DescriptorSet,
    KDForestIndex,
    Match,
    MatchConfig,
    build_index,
    keypoint_sites,
    match_descriptors,
)
from .models import Detection
from .persistence import load_bundle, save_bundle

logger = logging.getLogger(__name__)

_TWO_PI = 2.0 * math.pi
MODELS_FORMAT_VERSION = 1


@dataclass(eq=False)
class ObjectModel:
    model_id: str
    class_name: str
    width: int
    height: int
    features: FeatureSet

    def __post_init__(self) -> None:
        if len(self.features) < 3:
            raise TrainingError(
                f"Model {self.model_id!r} has {len(self.features)} keypoints; an affine pose needs 3"
            )

    @property
    def corners(self) -> np.ndarray:
        w, h = float(self.width), float(self.height)
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def build_model(
    img: Image, model_id: str, class_name: str | None = None, cfg: ScaleSpaceConfig | None = None
) -> ObjectModel:
    """Model from a single training image."""
    features = extract_features(img, cfg)
    logger.info("Model %s: %d features from %dx%d image", model_id, len(features), img.width, img.height)
    return ObjectModel(model_id, class_name or model_id, img.width, img.height, features)


@dataclass(frozen=True)
class HoughConfig:
    location_bin: float = 0.25
    orientation_bin: float = math.pi / 6.0
    # log2 units; 1.0 means one bin per factor of two
    scale_bin: float = 1.0
    min_votes: int = 3
    nms: bool = True

    def __post_init__(self) -> None:
        if self.min_votes < 3:
            raise ConfigError(f"min_votes must be >= 3, got {self.min_votes}")
        if self.location_bin <= 0 or self.orientation_bin <= 0 or self.scale_bin <= 0:
            raise ConfigError("Hough bin sizes must be positive")

    @property
    def orientation_bins(self) -> int:
        return max(1, int(round(_TWO_PI / self.orientation_bin)))


@dataclass(frozen=True, eq=False)
class Hypothesis:
    model_id: str
    transform: AffineTransform
    model_points: np.ndarray
    image_points: np.ndarray
    support: tuple[int, ...]
    box: BoundingBox | None = None

    @property
    def score(self) -> int:
        return len(self.support)

    @property
    def center(self) -> tuple[float, float]:
        if self.box is not None:
            return self.box.center
        pts = self.image_points.mean(axis=0)
        return float(pts[0]), float(pts[1])

    def keep(self, mask: np.ndarray, transform: AffineTransform, model: ObjectModel | None = None) -> Hypothesis:
        """Restrict support to ``mask`` and swap in ``transform``."""
        support = tuple(s for s, m in zip(self.support, mask) if m)
        box = project_box(transform, model) if model is not None else self.box
        return Hypothesis(
            self.model_id, transform, self.model_points[mask], self.image_points[mask], support, box
        )


def project_box(t: AffineTransform, model: ObjectModel) -> BoundingBox | None:
    pts = t.apply(model.corners)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if not (lo[0] < hi[0] and lo[1] < hi[1]):
        return None
    return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True)
class SiftPipelineConfig:
    features: ScaleSpaceConfig = field(default_factory=ScaleSpaceConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    hough: HoughConfig = field(default_factory=HoughConfig)
    use_ransac: bool = True
    use_irls: bool = True
    use_heuristics: bool = True
    min_center_separation: float = 20.0
    min_scale_ratio: float = 0.2
    ransac_iters: int = 200
    inlier_px: float = 3.0
    # RANSAC consensus floor; raised to hough.min_votes when that is larger
    ransac_min_inliers: int = 5
    irls_max_iters: int = 20
    irls_tol: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.min_scale_ratio <= 1.0:
            raise ConfigError(f"min_scale_ratio must be in (0, 1], got {self.min_scale_ratio}")
        if self.min_center_separation < 0 or self.inlier_px <= 0 or self.ransac_iters < 1:
            raise ConfigError("heuristic and RANSAC parameters must be positive")
        if self.ransac_min_inliers < 4:
            raise ConfigError(f"ransac_min_inliers must be >= 4, got {self.ransac_min_inliers}")


def _preset(detector: str, min_votes: int, ransac: bool, heuristics: bool) -> SiftPipelineConfig:
    return SiftPipelineConfig(
        features=ScaleSpaceConfig(detector=detector),
        match=MatchConfig(distance_ratio=0.8, approx=True),
        hough=HoughConfig(min_votes=min_votes, nms=True),
        use_ransac=ransac,
        use_irls=True,
        use_heuristics=heuristics,
    )


# The six compared settings, fastest first. Only the DoG rows can run.
SIFT_PRESETS: dict[str, SiftPipelineConfig] = {
    "config1": _preset("surf", 5, False, False),
    "config2": _preset("surf", 3, True, True),
    "config3": _preset("dog", 10, False, False),
    "config4": _preset("dog", 10, True, True),
    "config5": _preset("dog", 5, True, True),
    "config6": _preset("heslap", 10, True, True),
}


# ---------------------------------------------------------------------------
# Hough voting
# ---------------------------------------------------------------------------

def _two_nearest(u: float) -> tuple[int, int]:
    b = math.floor(u)
    return (b, b - 1) if u - b < 0.5 else (b, b + 1)


def _match_pose(match: Match, query: FeatureSet, model: ObjectModel) -> tuple[float, float, float, float]:
    """Predicted model-centre location, rotation and scale implied by one match."""
    mk = model.features.keypoints[match.model_keypoint_index]
    ik = query.keypoints[match.query_index]
    s = ik.scale / mk.scale
    dtheta = (ik.orientation - mk.orientation) % _TWO_PI
    cx, cy = model.width / 2.0 - mk.x, model.height / 2.0 - mk.y
    cos_t, sin_t = math.cos(dtheta), math.sin(dtheta)
    px = ik.x + s * (cos_t * cx - sin_t * cy)
    py = ik.y + s * (sin_t * cx + cos_t * cy)
    return px, py, dtheta, s


def hough_cluster(
    matches: list[Match],
    query: FeatureSet,
    model: ObjectModel,
    image_dims: tuple[int, int],
    cfg: HoughConfig | None = None,
) -> list[Hypothesis]:
    """Pose clusters with at least ``min_votes`` matches.

    Each match votes for the two nearest bins in each of the four pose
    dimensions. Location bins widen with the scale bin they belong to.
    """
    cfg = cfg or HoughConfig()
    own = [m for m in matches if m.model_id == model.model_id]
    if len(own) < cfg.min_votes:
        return []
    n_ori = cfg.orientation_bins
    max_dim = float(max(model.width, model.height))
    bins: dict[tuple[int, int, int, int], set[int]] = {}
    poses = []
    for mi, match in enumerate(own):
        px, py, dtheta, s = _match_pose(match, query, model)
        poses.append((px, py, dtheta, s))
        u_s = math.log2(s) / cfg.scale_bin
        u_o = dtheta / cfg.orientation_bin
        for bs in _two_nearest(u_s):
            loc = cfg.location_bin * max_dim * 2.0 ** ((bs + 0.5) * cfg.scale_bin)
            for bo in _two_nearest(u_o):
                for bx in _two_nearest(px / loc):
                    for by in _two_nearest(py / loc):
                        bins.setdefault((bx, by, bo % n_ori, bs), set()).add(mi)

    counts = {key: len(members) for key, members in bins.items()}
    qualifying = [key for key, c in counts.items() if c >= cfg.min_votes]
    if cfg.nms:
        offsets = list(itertools.product((-1, 0, 1), repeat=4))
        survivors = []
        for key in qualifying:
            c = counts[key]
            if all(
                counts.get((key[0] + dx, key[1] + dy, (key[2] + do) % n_ori, key[3] + ds), 0) <= c
                for dx, dy, do, ds in offsets
            ):
                survivors.append(key)
        qualifying = survivors

    hypotheses: list[Hypothesis] = []
    seen: set[frozenset[int]] = set()
    width, height = image_dims
    for key in sorted(qualifying, key=lambda k: (-counts[k], k)):
        members = frozenset(bins[key])
        if members in seen:
            continue
        seen.add(members)
        idx = sorted(members)
        model_pts = np.array([
            (model.features.keypoints[own[i].model_keypoint_index].x,
             model.features.keypoints[own[i].model_keypoint_index].y) for i in idx
        ])
        image_pts = np.array([(query.keypoints[own[i].query_index].x, query.keypoints[own[i].query_index].y) for i in idx])
        try:
            t = fit_affine_least_squares(model_pts, image_pts)
        except SingularTransformError:
            t = _mean_similarity([poses[i] for i in idx], model)
        hypotheses.append(Hypothesis(
            model.model_id,
            t,
            model_pts,
            image_pts,
            tuple(own[i].query_index for i in idx),
            project_box(t, model),
        ))
    logger.debug("Model %s: %d matches gave %d pose clusters", model.model_id, len(own), len(hypotheses))
    return hypotheses


def _mean_similarity(poses: list[tuple[float, float, float, float]], model: ObjectModel) -> AffineTransform:
    arr = np.array(poses)
    s = float(np.exp(np.mean(np.log(arr[:, 3]))))
    theta = float(np.arctan2(np.sin(arr[:, 2]).mean(), np.cos(arr[:, 2]).mean()))
    px, py = arr[:, 0].mean(), arr[:, 1].mean()
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = model.width / 2.0, model.height / 2.0
    tx = px - s * (cos_t * cx - sin_t * cy)
    ty = py - s * (sin_t * cx + cos_t * cy)
    return AffineTransform.similarity(s, theta, float(tx), float(ty))


# ---------------------------------------------------------------------------
# Verification and refinement
# ---------------------------------------------------------------------------

def refine_irls(
    hyp: Hypothesis, max_iters: int = 20, tol: float = 1e-3, model: ObjectModel | None = None
) -> Hypothesis:
    """Reweighted affine fit; support shrinks to the final inliers.

    Raises RefinementFailed when the weights collapse.
    """
    if hyp.score < 3:
        raise RefinementFailed(f"Support of {hyp.score} is below the affine minimum")
    if hyp.score == 3:
        return hyp
    try:
        result = irls_affine(hyp.model_points, hyp.image_points, max_iters, tol)
    except SingularTransformError as exc:
        raise RefinementFailed(str(exc)) from exc
    return hyp.keep(result.inliers, result.transform, model)


def irls_trace(hyp: Hypothesis, max_iters: int = 20, tol: float = 1e-3) -> list[float]:
    """Robust objective after each reweighting step."""
    return irls_affine(hyp.model_points, hyp.image_points, max_iters, tol).trace


def verify_ransac(
    hyp: Hypothesis,
    inlier_px: float = 3.0,
    iters: int = 200,
    seed: int | np.random.Generator = 0,
    min_votes: int = 3,
    model: ObjectModel | None = None,
    min_inliers: int = 5,
) -> Hypothesis | None:
    """Consensus check; ``None`` means the hypothesis was rejected.

    A hypothesis survives only if at least ``max(min_votes, min_inliers)``
    of its correspondences agree with one affine pose.
    """
    floor = max(min_votes, min_inliers)
    if hyp.score < floor:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t, mask = ransac_affine(hyp.model_points, hyp.image_points, inlier_px, iters, rng, floor)
    if t is None or int(mask.sum()) < floor:
        logger.debug("RANSAC rejected %s hypothesis (%d inliers)", hyp.model_id, int(mask.sum()))
        return None
    return hyp.keep(mask, t, model)


def apply_heuristics(
    hyps: list[Hypothesis], min_scale_ratio: float = 0.2, min_center_separation: float = 20.0
) -> list[Hypothesis]:
    """Drop anisotropic poses, then keep the best of same-model hypotheses
    whose centres are closer than ``min_center_separation``."""
    plausible = []
    for h in hyps:
        sx, sy = h.transform.sx, h.transform.sy
        if min(sx, sy) / max(sx, sy) >= min_scale_ratio:
            plausible.append(h)
    order = sorted(range(len(plausible)), key=lambda i: (-plausible[i].score, i))
    kept: list[Hypothesis] = []
    for i in order:
        h = plausible[i]
        cx, cy = h.center
        if any(
            k.model_id == h.model_id and math.hypot(k.center[0] - cx, k.center[1] - cy) < min_center_separation
            for k in kept
        ):
            continue
        kept.append(h)
    return kept


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

class SiftRecognizer:
    """Holds the model database and index so consecutive frames reuse them."""

    def __init__(self, models: list[ObjectModel], cfg: SiftPipelineConfig | None = None) -> None:
        if not models:
            raise ConfigError("SiftRecognizer needs at least one model")
        self.cfg = cfg or SiftPipelineConfig()
        get_detector(self.cfg.features.detector)
        self.models = {m.model_id: m for m in models}
        self.db = DescriptorSet.concat(
            [(m.model_id, m.features.descriptors) for m in models],
            [keypoint_sites(m.features) for m in models],
        )
        self.index: KDForestIndex | None = None
        if self.cfg.match.approx and len(self.db) >= 2:
            self.index = build_index(self.db, self.cfg.match.seed, self.cfg.match.trees, self.cfg.match.leaf_size)

    def detect(self, img: Image, frame_id: str = "") -> list[Detection]:
        cfg = self.cfg
        query = extract_features(img, cfg.features)
        if len(query) == 0:
            return []
        matches = match_descriptors(query, self.index if self.index is not None else self.db, cfg.match)
        rng = np.random.default_rng(cfg.seed)
        hyps: list[Hypothesis] = []
        for model_id in sorted(self.models):
            model = self.models[model_id]
            for hyp in hough_cluster(matches, query, model, (img.width, img.height), cfg.hough):
                if cfg.use_ransac:
                    hyp = verify_ransac(
                        hyp, cfg.inlier_px, cfg.ransac_iters, rng, cfg.hough.min_votes, model, cfg.ransac_min_inliers
                    )
                    if hyp is None:
                        continue
                if cfg.use_irls:
                    try:
                        hyp = refine_irls(hyp, cfg.irls_max_iters, cfg.irls_tol, model)
                    except RefinementFailed as exc:
                        logger.debug("IRLS rejected %s hypothesis: %s", model_id, exc)
                        continue
                if hyp.box is None:
                    continue
                hyps.append(hyp)
        if cfg.use_heuristics:
            hyps = apply_heuristics(hyps, cfg.min_scale_ratio, cfg.min_center_separation)

        detections = []
        for hyp in hyps:
            if hyp.box is None:
                continue
            # the full projected box, even where it leaves the frame
            model = self.models[hyp.model_id]
            detections.append(Detection(frame_id, model.class_name, hyp.box, float(hyp.score)))
        logger.debug("Frame %s: %d matches, %d detections", frame_id, len(matches), len(detections))
        return detections


def detect(
    img: Image, models: list[ObjectModel], cfg: SiftPipelineConfig | None = None, frame_id: str = ""
) -> list[Detection]:
    return SiftRecognizer(models, cfg).detect(img, frame_id)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_models(models: list[ObjectModel], path: str | Path) -> None:
    """All models in one bundle; keypoint rows are x, y, scale, orientation,
    response, octave."""
    counts = np.array([len(m.features) for m in models], dtype=np.int64)
    keypoints = np.array(
        [(k.x, k.y, k.scale, k.orientation, k.response, k.octave) for m in models for k in m.features.keypoints],
        dtype=np.float64,
    ).reshape(-1, 6)
    save_bundle(path, "sift-models", MODELS_FORMAT_VERSION, {
        "model_ids": np.array([m.model_id for m in models], dtype=str),
        "class_names": np.array([m.class_name for m in models], dtype=str),
        "dims": np.array([(m.width, m.height) for m in models], dtype=np.int64).reshape(-1, 2),
        "counts": counts,
        "keypoints": keypoints,
        "descriptors": np.concatenate([m.features.descriptors for m in models]) if models
        else np.zeros((0, 128), dtype=np.float32),
        "border_reflected": np.concatenate([m.features.border_reflected for m in models]) if models
        else np.zeros(0, dtype=bool),
        "low_contrast": np.concatenate([m.features.low_contrast for m in models]) if models
        else np.zeros(0, dtype=bool),
    })


def load_models(path: str | Path) -> list[ObjectModel]:
    arrays = load_bundle(path, "sift-models", MODELS_FORMAT_VERSION)
    offsets = np.concatenate([[0], np.cumsum(arrays["counts"])])
    models = []
    for i, (model_id, class_name) in enumerate(zip(arrays["model_ids"], arrays["class_names"])):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        kps = [
            Keypoint(float(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]))
            for r in arrays["keypoints"][lo:hi]
        ]
        features = FeatureSet(
            kps,
            arrays["descriptors"][lo:hi].astype(np.float32),
            arrays["border_reflected"][lo:hi].astype(bool),
            arrays["low_contrast"][lo:hi].astype(bool),
        )
        w, h = arrays["dims"][i]
        models.append(ObjectModel(str(model_id), str(class_name), int(w), int(h), features))
    return models
