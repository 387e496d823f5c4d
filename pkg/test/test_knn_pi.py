import os
import sys

import numpy as np
import pytest

modules_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(modules_path, 'src'))

from ruepi.conformal import split_cp_calibrate
from ruepi.exceptions import ConfigError
from ruepi.knn_pi import (KdTree, choose_k, knn_calibrate, knn_half_widths, knn_intervals, knn_interval_width,
                          load_knn, neighbour_rank, save_knn)
from ruepi.neural import CalibrationErrors


def make_errors(rho, err):
    rho = np.asarray(rho, dtype=np.float64)
    return CalibrationErrors(rho=rho, err=np.asarray(err, dtype=np.float64), rho_scalar=rho.sum(axis=1))


class TestChooseK(object):
    def test_small_set_rule(self):
        assert choose_k(1244, 0.05) == 39

    def test_large_set(self):
        assert choose_k(8765, 0.05) == 94

    def test_capped_at_n(self):
        assert choose_k(4, 0.05) == 4
        assert choose_k(1, 0.05) == 1

    def test_override(self):
        assert choose_k(1244, 0.05, override=80) == 80
        with pytest.raises(ConfigError):
            choose_k(10, 0.05, override=11)


class TestNeighbourRank(object):
    def test_ranks(self):
        assert neighbour_rank(39, 0.05) == 38
        assert neighbour_rank(19, 0.05) == 19
        assert neighbour_rank(5, 0.05) == 5


class TestKdTree(object):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        points = rng.normal(size=(500, 20))
        tree = KdTree(points)
        for q in rng.normal(size=(50, 20)):
            dist = np.sqrt(((points - q) ** 2).sum(axis=1))
            expected = np.lexsort((np.arange(500), dist))[:10]
            idx, d = tree.query(q, 10)
            np.testing.assert_array_equal(idx, expected)
            np.testing.assert_allclose(d, dist[expected])

    def test_ties_prefer_lower_index(self):
        tree = KdTree(np.array([[0.0], [1.0], [-1.0], [2.0], [-2.0]]))
        idx, _ = tree.query([0.0], 2)
        np.testing.assert_array_equal(idx, [0, 1])
        idx, _ = tree.query([0.0], 4)
        np.testing.assert_array_equal(idx, [0, 1, 2, 3])

    def test_duplicates_are_kept(self):
        tree = KdTree(np.array([[1.0, 1.0], [5.0, 5.0], [1.0, 1.0], [1.0, 1.0]]))
        idx, d = tree.query([1.0, 1.0], 3)
        np.testing.assert_array_equal(idx, [0, 2, 3])
        np.testing.assert_array_equal(d, 0.0)

    def test_single_point(self):
        tree = KdTree(np.array([[3.0, 4.0]]))
        idx, d = tree.query([0.0, 0.0], 1)
        assert idx.tolist() == [0]
        assert d[0] == pytest.approx(5.0)


class TestKnnIntervals(object):
    def test_constant_neighbour_errors(self):
        rng = np.random.default_rng(0)
        cal = knn_calibrate(make_errors(rng.normal(size=(30, 3)), np.full((30, 2), 1.5)), 0.1, k_override=7)
        np.testing.assert_array_equal(knn_half_widths(cal, rng.normal(size=(4, 3))), 1.5)

    def test_full_neighbourhood_matches_split_cp(self):
        rng = np.random.default_rng(5)
        rho = rng.normal(size=(200, 3))
        err = rng.exponential(size=(200, 2))
        cal = knn_calibrate(make_errors(rho, err), 0.05, k_override=200)
        q_hat = split_cp_calibrate(err, 0.05).q_hat
        widths = knn_half_widths(cal, rng.normal(size=(6, 3)))
        np.testing.assert_array_equal(widths, np.tile(q_hat, (6, 1)))

    def test_identical_queries(self):
        rng = np.random.default_rng(6)
        cal = knn_calibrate(make_errors(rng.normal(size=(50, 2)), rng.exponential(size=(50, 1))), 0.1)
        row = rng.normal(size=2)
        np.testing.assert_array_equal(knn_interval_width(cal, row), knn_interval_width(cal, row.copy()))
        batch = knn_intervals(cal, np.zeros((2, 1)), np.vstack([row, row]))
        assert batch.lower[0, 0] == batch.lower[1, 0]

    def test_standardized_save_load(self, tmp_path):
        rng = np.random.default_rng(7)
        rho = rng.normal(size=(40, 3)) * np.array([1.0, 10.0, 100.0])
        cal = knn_calibrate(make_errors(rho, rng.exponential(size=(40, 2))), 0.1, k_override=9, standardize=True)
        path = str(tmp_path / 'knn.json')
        save_knn(path, cal)
        back = load_knn(path)
        assert back.k == 9
        queries = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(back.tree.points, cal.tree.points)
        np.testing.assert_array_equal(knn_half_widths(back, queries), knn_half_widths(cal, queries))

    def test_tied_neighbours_survive_save_load(self, tmp_path):
        rho = np.array([[3.0, 0.1], [1.0, 0.3], [-1.0, 0.3], [-3.0, 0.1], [0.0, 0.7]])
        err = np.arange(1.0, 6.0).reshape(-1, 1)
        cal = knn_calibrate(make_errors(rho, err), 0.5, k_override=1, standardize=True)
        path = str(tmp_path / 'knn.json')
        save_knn(path, cal)
        back = load_knn(path)
        query = np.array([0.0, 0.3])
        np.testing.assert_array_equal(back.tree.query(query / back.scale, 1)[0], [1])
        np.testing.assert_array_equal(back.scale, cal.scale)


class TestKnnInvariants(object):
    def test_larger_alpha_never_widens(self):
        rng = np.random.default_rng(11)
        rho = rng.exponential(size=(300, 2))
        err = rng.exponential(size=(300, 2))
        queries = rng.exponential(size=(20, 2))
        widths = [knn_half_widths(knn_calibrate(make_errors(rho, err), a, k_override=25), queries)
                  for a in (0.02, 0.05, 0.1, 0.2, 0.4)]
        assert np.all(np.diff(np.stack(widths), axis=0) <= 0)

    def test_widths_follow_rho(self):
        rng = np.random.default_rng(12)
        rho = rng.exponential(size=(2000, 1))
        err = rho * rng.uniform(0.5, 1.5, size=(2000, 1))
        cal = knn_calibrate(make_errors(rho, err), 0.05)
        queries = rng.exponential(size=(1000, 1))
        widths = knn_half_widths(cal, queries)[:, 0]
        low, high = np.quantile(queries[:, 0], [0.1, 0.9])
        assert widths[queries[:, 0] >= high].mean() > widths[queries[:, 0] <= low].mean()
