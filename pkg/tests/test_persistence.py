"""Tests for versioned array bundles."""
from __future__ import annotations

import numpy as np
import pytest

from percept_bench.errors import ModelFileError
from percept_bench.persistence import load_bundle, save_bundle


def make_arrays() -> dict[str, np.ndarray]:
    return {
        "weights": np.linspace(0, 1, 7),
        "labels": np.array(["cup", "book"], dtype=str),
        "counts": np.arange(6, dtype=np.int64).reshape(2, 3),
    }


class TestBundles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "b.npz"
        save_bundle(path, "thing", 3, make_arrays())
        arrays = load_bundle(path, "thing", 3)
        assert set(arrays) == {"weights", "labels", "counts"}
        assert np.array_equal(arrays["counts"], make_arrays()["counts"])
        assert arrays["labels"].tolist() == ["cup", "book"]

    def test_readable_by_numpy(self, tmp_path):
        path = tmp_path / "b.npz"
        save_bundle(path, "thing", 1, make_arrays())
        with np.load(path) as data:
            assert "weights" in data.files

    def test_byte_identical_output(self, tmp_path):
        save_bundle(tmp_path / "a.npz", "thing", 1, make_arrays())
        save_bundle(tmp_path / "b.npz", "thing", 1, make_arrays())
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_wrong_kind(self, tmp_path):
        save_bundle(tmp_path / "b.npz", "thing", 1, make_arrays())
        with pytest.raises(ModelFileError, match="expected 'other'"):
            load_bundle(tmp_path / "b.npz", "other", 1)

    def test_wrong_version(self, tmp_path):
        save_bundle(tmp_path / "b.npz", "thing", 1, make_arrays())
        with pytest.raises(ModelFileError, match="v1"):
            load_bundle(tmp_path / "b.npz", "thing", 2)

    def test_not_a_bundle(self, tmp_path):
        path = tmp_path / "b.npz"
        path.write_bytes(b"garbage")
        with pytest.raises(ModelFileError):
            load_bundle(path, "thing", 1)

    def test_plain_npz_without_header(self, tmp_path):
        path = tmp_path / "plain.npz"
        np.savez(path, x=np.zeros(3))
        with pytest.raises(ModelFileError, match="header"):
            load_bundle(path, "thing", 1)

    def test_missing(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_bundle(tmp_path / "none.npz", "thing", 1)
