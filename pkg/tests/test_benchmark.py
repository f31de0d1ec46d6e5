"""Tests for frame sources, detector persistence and the benchmark loop."""
from __future__ import annotations

import json

import numpy as np
import pytest

from percept_bench.benchmark import (
    Frame,
    cascade_positives,
    dataset_frames,
    load_detector,
    run_benchmark,
    save_detector,
    synthetic_backgrounds,
    synthetic_frames,
    synthetic_models,
    train_detector,
    training_size_sweep,
)
from percept_bench.cascade import BoostConfig, CascadeDetector, ScanConfig
from percept_bench.config import BenchConfig, HarnessConfig
from percept_bench.errors import ConfigError, ModelFileError
from percept_bench.evaluation import parse_detections, write_annotations
from percept_bench.imaging import BoundingBox, Image, write_pgm
from percept_bench.models import AnnotationRecord, Detection
from percept_bench.sift_recognizer import SiftRecognizer
from percept_bench.synthetic import SceneSpec
from percept_bench.vocab_tree import VocabTreeDetector


def make_cfg(**bench) -> HarnessConfig:
    defaults = dict(n_scenes=2, null_scenes=1, n_models=1, model_size=(40, 30), n_backgrounds=1, views_per_model=3)
    defaults.update(bench)
    return HarnessConfig(
        seed=4,
        scene=SceneSpec(width=160, height=120),
        bench=BenchConfig(**defaults),
        boost=BoostConfig(max_stages=1, max_stumps=3, negatives_per_stage=40, feature_stride=6, feature_size_step=6),
        scan=ScanConfig(scale_factor=2.0, step=4),
    )


class OracleDetector:
    """Reports every ground-truth box of the frame it is shown."""

    def __init__(self, frames: list[Frame], extra: bool = False) -> None:
        self.records = {f.frame_id: f.records for f in frames}
        self.extra = extra
        self.calls = 0

    def detect(self, img: Image, frame_id: str = "") -> list[Detection]:
        self.calls += 1
        dets = [Detection(frame_id, r.class_name, r.box, 1.0) for r in self.records[frame_id]]
        if self.extra:
            dets.append(Detection(frame_id, "ghost", BoundingBox(0, 0, 5, 5), 0.1))
        return dets


class FixedWindowsDetector(VocabTreeDetector):
    """Claims five windows per frame and finds nothing."""

    def __init__(self) -> None:
        pass

    def detect_counted(self, img, frame_id="", features=None, groups=None):
        return [], 5


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------

class TestSyntheticFrames:
    def test_scenes_then_null_scenes(self):
        cfg = make_cfg()
        frames = synthetic_frames(synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)
        assert [f.frame_id for f in frames] == ["scene0000", "scene0001", "null0000"]
        assert frames[-1].records == []
        assert all(len(f.records) == 1 for f in frames[:2])

    def test_models_and_backgrounds_follow_config(self):
        cfg = make_cfg(n_models=2)
        models = synthetic_models(cfg)
        assert [name for name, _ in models] == ["object_00", "object_01"]
        assert models[0][1].shape == (30, 40)
        assert synthetic_backgrounds(cfg)[0].shape == (120, 160)

    def test_seeded(self):
        cfg = make_cfg()
        a = synthetic_frames(synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)
        b = synthetic_frames(synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)
        assert np.array_equal(a[0].image.data, b[0].image.data)


class TestDatasetFrames:
    def _write(self, tmp_path, names: list[str]) -> None:
        frames = tmp_path / "frames"
        frames.mkdir()
        for name in names:
            write_pgm(Image.blank(40, 30, value=90), frames / name)

    def test_all_images_loaded_in_name_order(self, tmp_path):
        self._write(tmp_path, ["b.pgm", "a.pgm"])
        write_annotations([AnnotationRecord("b.pgm", "cup", BoundingBox(1, 1, 20, 20))], tmp_path / "ann.txt")
        frames = dataset_frames(tmp_path / "ann.txt", tmp_path / "frames")
        assert [f.frame_id for f in frames] == ["a.pgm", "b.pgm"]
        assert frames[0].records == []
        assert frames[1].records[0].class_name == "cup"

    def test_annotated_frame_missing(self, tmp_path):
        self._write(tmp_path, ["a.pgm"])
        write_annotations([AnnotationRecord("zz.pgm", "cup", BoundingBox(1, 1, 20, 20))], tmp_path / "ann.txt")
        with pytest.raises(ConfigError, match="zz.pgm"):
            dataset_frames(tmp_path / "ann.txt", tmp_path / "frames")


# ---------------------------------------------------------------------------
# Detectors
# ---------------------------------------------------------------------------

class TestDetectors:
    def test_cascade_positives_include_base_view(self):
        positives = cascade_positives(Image.blank(40, 30, value=128), views=3, seed=0)
        assert positives.shape == (4, 24, 24)
        assert (positives[0] == 128).all()

    def test_cascade_train_save_load(self, tmp_path):
        cfg = make_cfg()
        detector = train_detector("cascade", synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)
        assert isinstance(detector, CascadeDetector)
        save_detector(detector, tmp_path / "cascade.npz")
        loaded = load_detector("cascade", tmp_path / "cascade.npz", cfg)
        assert [c.class_name for c in loaded.cascades] == ["object_00"]
        assert len(loaded.cascades[0].stages) == len(detector.cascades[0].stages)

    def test_sift_train_save_load(self, tmp_path):
        cfg = make_cfg(model_size=(96, 72))
        detector = train_detector("sift", synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)
        assert isinstance(detector, SiftRecognizer)
        save_detector(detector, tmp_path / "sift.npz")
        loaded = load_detector("sift", tmp_path / "sift.npz", cfg)
        assert list(loaded.models) == list(detector.models)

    def test_model_path_required(self):
        with pytest.raises(ModelFileError):
            load_detector("sift", None, make_cfg())

    def test_model_file_missing(self, tmp_path):
        with pytest.raises(ModelFileError, match="not found"):
            load_detector("vtree", tmp_path / "none.npz", make_cfg())

    def test_unknown_method(self, tmp_path):
        with pytest.raises(ConfigError):
            load_detector("hog", tmp_path / "x.npz", make_cfg())

    def test_cannot_persist_foreign_detector(self, tmp_path):
        with pytest.raises(ConfigError):
            save_detector(OracleDetector([]), tmp_path / "x.npz")


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class TestRunBenchmark:
    def _frames(self) -> list[Frame]:
        cfg = make_cfg()
        return synthetic_frames(synthetic_models(cfg), synthetic_backgrounds(cfg), cfg)

    def test_oracle_scores_perfectly(self):
        frames = self._frames()
        detector = OracleDetector(frames)
        result = run_benchmark(frames, "sift", make_cfg(), detector=detector)
        agg = result.report.aggregate
        assert (agg.precision, agg.recall, agg.f) == (1.0, 1.0, 1.0)
        assert result.report.frames == 3
        assert detector.calls == 3
        assert len(result.timing.per_frame_ms) == 3

    def test_extra_detections_are_false_positives(self):
        frames = self._frames()
        result = run_benchmark(frames, "cascade", make_cfg(), detector=OracleDetector(frames, extra=True))
        counts = result.report.counts.total
        assert (counts.tp, counts.fp, counts.fn) == (2, 3, 0)
        assert result.report.method == "cascade"

    def test_writes_report_and_detections(self, tmp_path):
        frames = self._frames()
        run_benchmark(frames, "sift", make_cfg(), detector=OracleDetector(frames), out_dir=tmp_path / "out")
        out = tmp_path / "out"
        assert {p.name for p in out.iterdir()} == {
            "report.json", "report.txt", "overlap.csv", "timing.json", "detections.txt"
        }
        assert json.loads((out / "report.json").read_text())["method"] == "sift"
        assert len(parse_detections(out / "detections.txt")) == 2

    def test_window_count_summed_per_run(self):
        frames = self._frames()
        detector = FixedWindowsDetector()
        for _ in range(2):
            result = run_benchmark(frames, "vtree", make_cfg(), detector=detector)
            assert result.report.extras["windows_evaluated"] == 15

    def test_no_window_count_for_other_methods(self):
        frames = self._frames()
        result = run_benchmark(frames, "sift", make_cfg(), detector=OracleDetector(frames))
        assert "windows_evaluated" not in result.report.extras

    def test_model_loaded_before_frames(self, tmp_path):
        frames = [Frame("f", Image.blank(10, 10), [])]
        with pytest.raises(ModelFileError):
            run_benchmark(frames, "sift", make_cfg(), model_path=tmp_path / "none.npz")


class TestSiftAcceptance:
    @pytest.mark.slow
    def test_recall_on_fifty_scenes_and_clean_null_scenes(self):
        cfg = HarnessConfig(seed=9, bench=BenchConfig(n_scenes=50, null_scenes=10, n_models=3, n_backgrounds=3))
        models = synthetic_models(cfg)
        backgrounds = synthetic_backgrounds(cfg)
        frames = synthetic_frames(models, backgrounds, cfg)
        detector = train_detector("sift", models, backgrounds, cfg)
        result = run_benchmark(frames, "sift", cfg, detector=detector)
        assert result.report.aggregate.recall >= 0.90
        # every model is found somewhere
        assert all(c.recall > 0 for c in result.report.per_class.values())
        flagged = {d.frame_id for d in result.detections}
        null_ids = [f.frame_id for f in frames if f.frame_id.startswith("null")]
        assert len(null_ids) == 10
        assert sum(fid not in flagged for fid in null_ids) >= 9


class TestTrainingSizeSweep:
    def test_one_point_per_size(self):
        cfg = BoostConfig(max_stages=2, max_stumps=4, negatives_per_stage=60, feature_stride=6, feature_size_step=6)
        points = training_size_sweep((10, 30), cfg, held_out=20, pool_images=2, seed=1)
        assert [p.positives for p in points] == [10, 30]
        for p in points:
            assert 0.0 <= p.detection_rate <= 1.0
            assert 0.0 <= p.fp_rate <= 1.0
            assert 0 <= p.stages <= 2

    @pytest.mark.slow
    def test_more_positives_generalise_better(self):
        points = training_size_sweep((50, 500), seed=0)
        assert points[1].f > points[0].f
