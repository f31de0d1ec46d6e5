"""Tests for exact and kd-forest descriptor search and ratio-test matching."""
from __future__ import annotations

import logging

import numpy as np
import pytest

from percept_bench.errors import ConfigError, IndexBuildError, ModelFileError
from percept_bench.features import DESCRIPTOR_DIM, FeatureSet, Keypoint
from percept_bench.matching import (
    DescriptorSet,
    MatchConfig,
    brute_force_top2,
    build_index,
    keypoint_sites,
    load_index,
    match_descriptors,
    save_index,
)


def make_rows(n: int, seed: int = 0, dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = rng.random((n, dim)).astype(np.float32)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_db(n: int = 300, seed: int = 0) -> DescriptorSet:
    rows = make_rows(n, seed)
    half = n // 2
    return DescriptorSet.concat([("cup", rows[:half]), ("book", rows[half:])])


def near_copies(rows: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Rows nudged by noise of norm about ``scale``."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=rows.shape)
    return (rows + scale * noise / np.linalg.norm(noise, axis=1, keepdims=True)).astype(np.float32)


class TestDescriptorSet:
    def test_concat_keeps_owner_tags(self):
        db = make_db(10)
        assert db.model_ids == ("cup", "book")
        assert db.owner(0) == ("cup", 0)
        assert db.owner(7) == ("book", 2)

    def test_empty_concat(self):
        assert len(DescriptorSet.concat([])) == 0

    def test_one_dimensional_matrix_rejected(self):
        with pytest.raises(ConfigError):
            DescriptorSet(np.zeros(5), [], [])

    def test_default_site_per_row(self):
        assert make_db(6).site.tolist() == list(range(6))

    def test_concat_offsets_sites(self):
        rows = make_rows(5)
        db = DescriptorSet.concat([("a", rows[:3]), ("b", rows[3:])], [np.array([0, 0, 1]), np.array([0, 0])])
        assert db.site.tolist() == [0, 0, 1, 2, 2]

    def test_site_count_must_match_models(self):
        with pytest.raises(ConfigError):
            DescriptorSet.concat([("a", make_rows(3))], [])

    def test_keypoint_sites_share_location(self):
        kps = [
            Keypoint(10.0, 20.0, 2.0, 0.1),
            Keypoint(30.0, 5.0, 2.0, 0.0),
            Keypoint(10.0, 20.0, 2.0, 2.5),
            Keypoint(10.0, 20.0, 4.0, 0.1),
        ]
        sites = keypoint_sites(FeatureSet(kps, make_rows(4)))
        assert sites[0] == sites[2]
        assert len({int(sites[0]), int(sites[1]), int(sites[3])}) == 3


class TestSearch:
    def test_unlimited_forest_equals_exact_scan(self):
        db = make_db()
        queries = make_rows(60, seed=1)
        exact = brute_force_top2(queries, db.descriptors)
        forest = build_index(db, seed=3).query_top2(queries, checks=None)
        assert np.array_equal(exact[0], forest[0])
        assert np.array_equal(exact[2], forest[2])
        assert np.allclose(exact[1], forest[1], rtol=0, atol=1e-12)
        assert np.allclose(exact[3], forest[3], rtol=0, atol=1e-12)

    def test_bounded_search_never_beats_exact(self):
        db = make_db()
        queries = make_rows(40, seed=2)
        _, d1_exact, _, d2_exact = brute_force_top2(queries, db.descriptors)
        _, d1, _, d2 = build_index(db, seed=0, trees=2).query_top2(queries, checks=4)
        assert (d1 >= d1_exact - 1e-12).all()
        assert (d2 >= d2_exact - 1e-12).all()

    def test_stored_row_is_its_own_neighbour(self):
        db = make_db()
        i1, d1, i2, _ = build_index(db).query_top2(db.descriptors[[5, 200]], checks=64)
        assert i1.tolist() == [5, 200]
        assert d1.tolist() == [0.0, 0.0]
        assert (i2 != i1).all()

    def test_exact_ties_prefer_lower_index(self):
        rows = np.zeros((3, 4), dtype=np.float32)
        rows[:, 0] = 1.0
        i1, _, i2, _ = brute_force_top2(np.zeros((1, 4)), rows)
        assert (i1[0], i2[0]) == (0, 1)

    def test_second_best_skips_rows_of_the_same_site(self):
        rows = make_rows(50)
        sites = np.r_[0, 0, 0, np.arange(1, 48)]
        queries = rows[[0]]
        i1, _, i2, _ = brute_force_top2(queries, rows, sites)
        assert i1[0] == 0
        assert sites[i2[0]] != 0
        db = DescriptorSet(rows, np.zeros(50), np.arange(50), ("m",), sites)
        forest = build_index(db, seed=1).query_top2(queries, checks=None)
        assert (forest[0][0], forest[2][0]) == (i1[0], i2[0])

    def test_index_needs_two_rows(self):
        with pytest.raises(IndexBuildError):
            build_index(DescriptorSet.from_array(make_rows(1)))


class TestMatchDescriptors:
    def test_exact_copy_passes_ratio_test(self):
        db = make_db()
        query = DescriptorSet.from_array(db.descriptors[[10, 250]])
        matches = match_descriptors(query, db, MatchConfig(approx=False))
        assert [(m.model_id, m.model_keypoint_index) for m in matches] == [("cup", 10), ("book", 100)]
        assert all(m.distance == 0.0 and m.ratio == 0.0 for m in matches)

    def test_equidistant_query_rejected(self):
        rows = np.zeros((2, DESCRIPTOR_DIM), dtype=np.float32)
        rows[0, 0] = 1.0
        rows[1, 1] = 1.0
        query = np.zeros((1, DESCRIPTOR_DIM), dtype=np.float32)
        query[0, 0] = query[0, 1] = np.sqrt(0.5)
        matches = match_descriptors(DescriptorSet.from_array(query), DescriptorSet.from_array(rows))
        assert matches == []

    def test_ratio_bound_respected(self):
        db = make_db()
        query = DescriptorSet.from_array(make_rows(80, seed=9))
        for m in match_descriptors(query, db, MatchConfig(distance_ratio=0.95)):
            assert m.ratio <= 0.95

    def test_approx_and_exact_agree_when_unbounded(self):
        db = make_db()
        query = DescriptorSet.from_array(np.vstack([db.descriptors[:20], make_rows(20, seed=4)]))
        exact = match_descriptors(query, db, MatchConfig(approx=False))
        approx = match_descriptors(query, db, MatchConfig(approx=True, approx_checks=None))
        assert [(m.query_index, m.db_index) for m in exact] == [(m.query_index, m.db_index) for m in approx]

    def test_other_orientation_does_not_veto_match(self):
        rows = make_rows(100, seed=3)
        rows[1] = near_copies(rows[[0]], 0.05, 1)[0]
        query = DescriptorSet.from_array(0.5 * (rows[[0]] + rows[[1]]))
        cfg = MatchConfig(approx=False)
        # rows 0 and 1 as two keypoints: too close to tell apart
        assert match_descriptors(query, DescriptorSet.from_array(rows, "m"), cfg) == []
        # rows 0 and 1 as two orientations of one keypoint
        sites = [np.r_[0, 0, np.arange(1, 99)]]
        matches = match_descriptors(query, DescriptorSet.concat([("m", rows)], sites), cfg)
        assert len(matches) == 1
        assert matches[0].model_keypoint_index in (0, 1)

    def test_single_site_database_matches_nothing(self):
        rows = make_rows(4)
        db = DescriptorSet.concat([("m", rows)], [np.zeros(4, dtype=np.int64)])
        assert match_descriptors(DescriptorSet.from_array(rows[:2]), db, MatchConfig(approx=False)) == []

    def test_ratio_set_equals_exact_for_500_queries(self):
        db = make_db(1000, seed=5)
        rng = np.random.default_rng(6)
        picked = rng.choice(1000, 300, replace=False)
        queries = np.vstack([near_copies(db.descriptors[picked], 0.15, 7), make_rows(200, seed=8)])
        query = DescriptorSet.from_array(queries)
        exact = match_descriptors(query, db, MatchConfig(approx=False))
        approx = match_descriptors(query, db, MatchConfig(approx=True, approx_checks=None, seed=4))
        assert len(exact) > 0
        assert [(m.query_index, m.db_index) for m in exact] == [(m.query_index, m.db_index) for m in approx]

    def test_tiny_database_warns(self, caplog):
        db = DescriptorSet.from_array(make_rows(1))
        with caplog.at_level(logging.WARNING, logger="percept_bench.matching"):
            assert match_descriptors(DescriptorSet.from_array(make_rows(3)), db) == []
        assert "ratio test" in caplog.text

    def test_empty_query(self):
        assert match_descriptors(DescriptorSet.from_array(np.zeros((0, DESCRIPTOR_DIM))), make_db()) == []

    @pytest.mark.parametrize("kwargs", [{"distance_ratio": 0.0}, {"approx_checks": 0}, {"trees": 0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            MatchConfig(**kwargs)


class TestSearchAgreement:
    @pytest.mark.slow
    def test_budget_64_agrees_with_exact_on_10k_rows(self):
        db = make_db(10_000, seed=11)
        rng = np.random.default_rng(12)
        queries = near_copies(db.descriptors[rng.choice(10_000, 500, replace=False)], 0.02, 13)
        exact = brute_force_top2(queries, db.descriptors)[0]
        approx = build_index(db, seed=0).query_top2(queries, checks=64)[0]
        assert (exact == approx).mean() >= 0.90


class TestIndexFiles:
    def test_save_and_load_give_same_answers(self, tmp_path):
        index = build_index(make_db(), seed=2)
        save_index(index, tmp_path / "index.npz")
        loaded = load_index(tmp_path / "index.npz")
        assert loaded.db.model_ids == ("cup", "book")
        queries = make_rows(15, seed=6)
        for a, b in zip(index.query_top2(queries, 16), loaded.query_top2(queries, 16)):
            assert np.array_equal(a, b)

    def test_identical_indexes_give_identical_files(self, tmp_path):
        save_index(build_index(make_db(), seed=2), tmp_path / "a.npz")
        save_index(build_index(make_db(), seed=2), tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_index(tmp_path / "absent.npz")
