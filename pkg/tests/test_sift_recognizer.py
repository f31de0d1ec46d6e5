"""Tests for pose voting, verification, heuristics and the SIFT recogniser."""
from __future__ import annotations

import numpy as np
import pytest

from percept_bench.affine import AffineTransform
from percept_bench.errors import ConfigError, RefinementFailed, TrainingError, UnsupportedDetectorError
from percept_bench.features import DESCRIPTOR_DIM, FeatureSet, Keypoint
from percept_bench.imaging import BoundingBox, Image, overlap_ratio
from percept_bench.matching import Match
from percept_bench.sift_recognizer import (
    SIFT_PRESETS,
    HoughConfig,
    Hypothesis,
    ObjectModel,
    SiftPipelineConfig,
    SiftRecognizer,
    apply_heuristics,
    build_model,
    hough_cluster,
    irls_trace,
    load_models,
    project_box,
    refine_irls,
    save_models,
    verify_ransac,
)
from percept_bench.synthetic import make_clutter, make_texture

POSE = AffineTransform.similarity(1.5, 0.3, 50.0, 40.0)


def make_model(n: int = 12, seed: int = 0, model_id: str = "m") -> ObjectModel:
    rng = np.random.default_rng(seed)
    pts = rng.uniform([10, 10], [150, 110], size=(n, 2))
    kps = [Keypoint(float(x), float(y), 2.0, 0.5) for x, y in pts]
    desc = rng.random((n, DESCRIPTOR_DIM)).astype(np.float32)
    return ObjectModel(model_id, "cup", 160, 120, FeatureSet(kps, desc))


def make_query(model: ObjectModel, pose: AffineTransform = POSE) -> FeatureSet:
    """Model keypoints carried through a similarity ``pose``."""
    pts = pose.apply(model.features.positions())
    scale = pose.sx
    turn = float(np.arctan2(pose.c, pose.a))
    kps = [
        Keypoint(float(x), float(y), k.scale * scale, (k.orientation + turn) % (2 * np.pi))
        for (x, y), k in zip(pts, model.features.keypoints)
    ]
    return FeatureSet(kps, model.features.descriptors.copy())


def identity_matches(model: ObjectModel) -> list[Match]:
    return [Match(i, model.model_id, i, 0.0, 0.0) for i in range(len(model.features))]


def make_hypothesis(n_in: int = 15, n_out: int = 4, seed: int = 0) -> Hypothesis:
    rng = np.random.default_rng(seed)
    model_pts = rng.uniform(0, 150, size=(n_in + n_out, 2))
    image_pts = POSE.apply(model_pts)
    image_pts[n_in:] += rng.uniform(60, 90, size=(n_out, 2))
    return Hypothesis("m", POSE, model_pts, image_pts, tuple(range(n_in + n_out)))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class TestObjectModel:
    def test_needs_three_keypoints(self):
        kps = [Keypoint(1.0, 1.0, 2.0, 0.0)] * 2
        with pytest.raises(TrainingError):
            ObjectModel("m", "cup", 10, 10, FeatureSet(kps, np.zeros((2, DESCRIPTOR_DIM))))

    def test_blank_training_image_rejected(self):
        with pytest.raises(TrainingError):
            build_model(Image.blank(64, 64, value=100), "blank")

    def test_corners(self):
        assert make_model().corners.tolist() == [[0, 0], [160, 0], [160, 120], [0, 120]]

    def test_project_box(self):
        box = project_box(AffineTransform(1, 0, 0, 1, 5, 7), make_model())
        assert box == BoundingBox(5, 7, 165, 127)


# ---------------------------------------------------------------------------
# Hough voting
# ---------------------------------------------------------------------------

class TestHoughCluster:
    def test_consistent_matches_form_one_hypothesis(self):
        model = make_model()
        query = make_query(model)
        hyps = hough_cluster(identity_matches(model), query, model, (640, 480))
        assert len(hyps) == 1
        hyp = hyps[0]
        assert hyp.score == len(model.features)
        assert hyp.transform.params == pytest.approx(POSE.params, abs=1e-6)
        expected = POSE.apply(model.corners)
        assert hyp.box.x_min == pytest.approx(expected[:, 0].min())
        assert hyp.box.y_max == pytest.approx(expected[:, 1].max())

    def test_too_few_votes(self):
        model = make_model()
        query = make_query(model)
        assert hough_cluster(identity_matches(model)[:4], query, model, (640, 480), HoughConfig(min_votes=5)) == []

    def test_other_models_matches_ignored(self):
        model = make_model()
        matches = [Match(m.query_index, "other", m.model_keypoint_index, 0.0, 0.0) for m in identity_matches(model)]
        assert hough_cluster(matches, make_query(model), model, (640, 480)) == []

    def test_two_poses_two_hypotheses(self):
        model = make_model(n=10)
        q1 = make_query(model)
        q2 = make_query(model, AffineTransform.similarity(0.7, 2.5, 400.0, 300.0))
        query = FeatureSet(q1.keypoints + q2.keypoints, np.vstack([q1.descriptors, q2.descriptors]))
        matches = identity_matches(model) + [Match(10 + i, "m", i, 0.0, 0.0) for i in range(10)]
        hyps = hough_cluster(matches, query, model, (640, 480))
        assert sorted(h.score for h in hyps) == [10, 10]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            HoughConfig(min_votes=2)
        with pytest.raises(ConfigError):
            HoughConfig(location_bin=0)

    def test_orientation_bin_count(self):
        assert HoughConfig().orientation_bins == 12


# ---------------------------------------------------------------------------
# Verification and refinement
# ---------------------------------------------------------------------------

class TestVerification:
    def test_ransac_drops_outliers(self):
        hyp = verify_ransac(make_hypothesis(), seed=3)
        assert hyp is not None
        assert hyp.support == tuple(range(15))
        assert hyp.transform.params == pytest.approx(POSE.params, abs=1e-6)

    def test_ransac_rejects_incoherent_support(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 200, size=(6, 2))
        hyp = Hypothesis("m", POSE, pts, rng.uniform(0, 200, size=(6, 2)), tuple(range(6)))
        assert verify_ransac(hyp, min_votes=5) is None

    def test_noise_hypotheses_rejected(self):
        # ten correspondences with no common pose; three of them always fit exactly
        rejected = 0
        for seed in range(200):
            rng = np.random.default_rng([seed, 11])
            model_pts = rng.uniform([0, 0], [160, 120], size=(10, 2))
            image_pts = rng.uniform([0, 0], [640, 480], size=(10, 2))
            hyp = Hypothesis("m", POSE, model_pts, image_pts, tuple(range(10)))
            rejected += verify_ransac(hyp, seed=seed) is None
        assert rejected >= 190

    def test_minimal_sample_is_not_consensus(self):
        assert verify_ransac(make_hypothesis(n_in=4, n_out=0)) is None
        assert verify_ransac(make_hypothesis(n_in=5, n_out=0)) is not None

    def test_min_votes_raises_floor(self):
        assert verify_ransac(make_hypothesis(n_in=8, n_out=0), min_votes=9) is None

    def test_irls_shrinks_support(self):
        hyp = refine_irls(make_hypothesis(seed=2))
        assert hyp.support == tuple(range(15))

    def test_irls_updates_box_when_model_given(self):
        model = make_model()
        hyp = refine_irls(make_hypothesis(seed=2), model=model)
        assert hyp.box is not None
        assert hyp.box.x_min == pytest.approx(POSE.apply(model.corners)[:, 0].min(), abs=1e-4)

    def test_irls_needs_three(self):
        hyp = make_hypothesis(n_in=2, n_out=0)
        with pytest.raises(RefinementFailed):
            refine_irls(hyp)

    def test_three_point_support_kept(self):
        hyp = make_hypothesis(n_in=3, n_out=0)
        assert refine_irls(hyp) is hyp

    def test_trace_starts_at_warm_start(self):
        trace = irls_trace(make_hypothesis(seed=4))
        assert len(trace) >= 2
        assert trace[-1] <= trace[0] + 1e-9


class TestHeuristics:
    def _hyp(self, model_id: str, t: AffineTransform, n: int, box: BoundingBox) -> Hypothesis:
        pts = np.zeros((n, 2))
        return Hypothesis(model_id, t, pts, pts, tuple(range(n)), box)

    def test_anisotropic_pose_dropped(self):
        squashed = AffineTransform(1.0, 0.0, 0.0, 0.1, 0.0, 0.0)
        kept = apply_heuristics([self._hyp("m", squashed, 5, BoundingBox(0, 0, 10, 10))])
        assert kept == []

    def test_nearby_duplicates_keep_stronger(self):
        t = AffineTransform.identity()
        weak = self._hyp("m", t, 4, BoundingBox(0, 0, 100, 100))
        strong = self._hyp("m", t, 9, BoundingBox(5, 5, 105, 105))
        other = self._hyp("n", t, 3, BoundingBox(0, 0, 100, 100))
        kept = apply_heuristics([weak, strong, other])
        assert kept == [strong, other]

    def test_distant_hypotheses_both_kept(self):
        t = AffineTransform.identity()
        a = self._hyp("m", t, 4, BoundingBox(0, 0, 50, 50))
        b = self._hyp("m", t, 4, BoundingBox(200, 200, 250, 250))
        assert len(apply_heuristics([a, b])) == 2


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

class TestSiftRecognizer:
    def test_finds_pasted_model(self):
        rng = np.random.default_rng(1)
        model_img = make_texture(160, 120, rng)
        scene = make_clutter(400, 300, rng).data.copy()
        scene[60:180, 100:260] = model_img.data
        recognizer = SiftRecognizer([build_model(model_img, "m", "poster")])
        dets = recognizer.detect(Image(scene), "f0")
        assert dets
        best = max(dets, key=lambda d: d.score)
        assert best.class_name == "poster"
        assert best.frame_id == "f0"
        assert overlap_ratio(BoundingBox(100, 60, 260, 180), best.box) > 0.7

    def test_blank_frame_gives_nothing(self):
        rng = np.random.default_rng(2)
        recognizer = SiftRecognizer([build_model(make_texture(120, 90, rng), "m")])
        assert recognizer.detect(Image.blank(200, 150, value=80)) == []

    def test_needs_models(self):
        with pytest.raises(ConfigError):
            SiftRecognizer([])

    def test_unbuilt_detector_preset_rejected(self):
        with pytest.raises(UnsupportedDetectorError):
            SiftRecognizer([make_model()], SIFT_PRESETS["config1"])

    def test_dog_presets(self):
        for name in ("config3", "config4", "config5"):
            assert SIFT_PRESETS[name].features.detector == "dog"
        assert SIFT_PRESETS["config4"].hough.min_votes == 10
        assert not SIFT_PRESETS["config3"].use_ransac

    def test_bad_pipeline_config(self):
        with pytest.raises(ConfigError):
            SiftPipelineConfig(min_scale_ratio=0.0)
        with pytest.raises(ConfigError):
            SiftPipelineConfig(ransac_min_inliers=3)

    def test_box_leaving_frame_not_clipped(self):
        rng = np.random.default_rng(1)
        model_img = make_texture(160, 120, rng)
        scene = make_clutter(400, 300, rng).data.copy()
        # only the left 100 columns of the model are in view
        scene[60:180, 300:400] = model_img.data[:, :100]
        recognizer = SiftRecognizer([build_model(model_img, "m", "poster")])
        dets = recognizer.detect(Image(scene), "f0")
        assert dets
        best = max(dets, key=lambda d: d.score)
        assert best.box.x_max > 430
        assert best.box.x_min == pytest.approx(300, abs=10)


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        models = [make_model(seed=0, model_id="a"), make_model(n=7, seed=1, model_id="b")]
        save_models(models, tmp_path / "models.npz")
        loaded = load_models(tmp_path / "models.npz")
        assert [m.model_id for m in loaded] == ["a", "b"]
        assert [len(m.features) for m in loaded] == [12, 7]
        assert loaded[1].features.keypoints == models[1].features.keypoints
        assert np.array_equal(loaded[0].features.descriptors, models[0].features.descriptors)
        assert (loaded[0].width, loaded[0].height) == (160, 120)
        assert loaded[0].class_name == "cup"
