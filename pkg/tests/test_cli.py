"""Tests for the percept-bench command line."""
from __future__ import annotations

import json

import numpy as np
import pytest

from percept_bench.__main__ import main
from percept_bench.evaluation import parse_annotations, parse_detections
from percept_bench.features import read_features
from percept_bench.imaging import Image, load_image, write_pgm
from percept_bench.synthetic import make_texture

SMALL = [
    "bench.n_scenes=1",
    "bench.n_models=1",
    "bench.model_size=[40, 30]",
    "bench.n_backgrounds=1",
    "bench.views_per_model=2",
    "scene.width=160",
    "scene.height=120",
    "boost.max_stages=1",
    "boost.max_stumps=2",
    "boost.negatives_per_stage=30",
    "boost.feature_stride=6",
    "boost.feature_size_step=6",
]


def small_args() -> list[str]:
    args = []
    for override in SMALL:
        args += ["--set", override]
    return args


@pytest.fixture(autouse=True)
def clear_env(monkeypatch):
    monkeypatch.delenv("PERCEPT_BENCH_SEED", raising=False)


class TestSynth:
    def test_writes_frames_models_and_annotations(self, tmp_path):
        out = tmp_path / "synth"
        assert main(["synth", "--out", str(out), *small_args(), "--set", "bench.null_scenes=1"]) == 0
        assert sorted(p.name for p in (out / "frames").iterdir()) == ["null0000.pgm", "scene0000.pgm"]
        assert (out / "models" / "object_00.pgm").exists()
        records = parse_annotations(out / "annotations.txt")
        assert [r.frame_id for r in records] == ["scene0000.pgm"]


class TestExtract:
    def test_feature_dump_and_text(self, tmp_path, capsys):
        image = tmp_path / "tex.pgm"
        write_pgm(make_texture(64, 64, np.random.default_rng(0)), image)
        code = main(["extract", str(image), "-o", str(tmp_path / "tex.pbft"), "--text", str(tmp_path / "tex.txt")])
        assert code == 0
        features = read_features(tmp_path / "tex.pbft")
        assert len(features) > 0
        assert len((tmp_path / "tex.txt").read_text().splitlines()) == len(features)
        assert "keypoints" in capsys.readouterr().out

    def test_region_label_export(self, tmp_path):
        image = tmp_path / "halves.pgm"
        data = np.zeros((60, 80), dtype=np.uint8)
        data[:, 40:] = 200
        write_pgm(Image(data), image)
        code = main(["extract", str(image), "-o", str(tmp_path / "h.pbft"), "--labels", str(tmp_path / "labels.pgm")])
        assert code == 0
        labels = load_image(tmp_path / "labels.pgm")
        assert (labels.width, labels.height) == (80, 60)
        # two flood regions, each with a nonzero grey level
        assert labels.data[30, 10] > 0
        assert labels.data[30, 70] > 0
        assert labels.data[30, 10] != labels.data[30, 70]


class TestTrainDetectBench:
    def test_cascade_train_then_detect(self, tmp_path):
        model = tmp_path / "cascade.npz"
        assert main(["train-cascade", "-o", str(model), *small_args()]) == 0
        assert model.exists()
        synth = tmp_path / "synth"
        main(["synth", "--out", str(synth), *small_args()])
        out = tmp_path / "dets.txt"
        code = main([
            "detect", "--method", "cascade", "--model", str(model), "-o", str(out),
            *small_args(), str(synth / "frames" / "scene0000.pgm"),
        ])
        assert code == 0
        assert all(d.frame_id == "scene0000.pgm" for d in parse_detections(out))

    def test_bench_trains_on_synthetic_data(self, tmp_path):
        out = tmp_path / "run"
        assert main(["bench", "--method", "cascade", "--out", str(out), *small_args()]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["method"] == "cascade"
        assert report["frames"] == 1


class TestExitCodes:
    def test_bad_override_is_config_error(self, capsys):
        assert main(["synth", "--out", "unused", "--set", "nosuch.key=1"]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_model_is_processing_error(self, tmp_path, capsys):
        image = tmp_path / "f.pgm"
        write_pgm(make_texture(40, 40, np.random.default_rng(1)), image)
        code = main(["detect", "--method", "sift", "--model", str(tmp_path / "none.npz"), str(image)])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_dataset_bench_needs_model(self, tmp_path):
        ann = tmp_path / "ann.txt"
        ann.write_text("")
        code = main([
            "bench", "--set", f"bench.annotations={ann}", "--set", f"bench.frames_dir={tmp_path}",
        ])
        assert code == 2

    def test_missing_config_file_uses_defaults(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path / "s"), "--config", str(tmp_path / "none.json"), *small_args()])
        assert code == 0

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["launch"])
