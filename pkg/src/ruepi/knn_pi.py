"""
K-nearest-neighbour prediction intervals in reconstruction-error space.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import logger
from .conformal import IntervalBatch, check_alpha
from .exceptions import ConfigError, DataError, DimensionError
from .statcore import ceil_rank
from .util import as_matrix, read_json, write_json

KNN = 'knn'
METRIC = 'euclidean'


def euclidean(points, query):
    return np.sqrt(np.sum((points - query) ** 2, axis=1))


class KdTree(object):
    """
    Exact Euclidean k-NN over a fixed point set.

    Equal distances are ordered by ascending row index, so results match a brute-force
    scan sorted on (distance, index).
    """

    def __init__(self, points):
        self.points = np.array(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise DataError("KD-tree needs a nonempty n x d point matrix, got shape {}".format(self.points.shape))
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def _order(self, candidates, query, k):
        candidates = np.asarray(candidates, dtype=np.int64)
        dist = euclidean(self.points[candidates], query)
        order = np.lexsort((candidates, dist))[:k]
        return candidates[order], dist[order]

    def query(self, query, k):
        """
        :return: (indices, distances) of the k nearest rows, nearest first.
        """
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.points.shape[1]:
            raise DimensionError("Query has {} dims, tree has {}".format(q.shape[0], self.points.shape[1]))
        n = len(self)
        if not 1 <= k <= n:
            raise ConfigError("k must lie in [1, {}], got {}".format(n, k))
        if k == n:
            return self._order(np.arange(n), q, k)

        # One extra neighbour shows whether equal distances straddle the k-th position.
        dist, idx = self._tree.query(q, k=k + 1)
        kth = euclidean(self.points[idx[k - 1:k]], q)[0]
        if np.isclose(dist[k], dist[k - 1], rtol=1e-9, atol=1e-12):
            radius = kth * (1.0 + 1e-9) + 1e-12
            candidates = self._tree.query_ball_point(q, r=radius)
            return self._order(candidates, q, k)
        return self._order(idx[:k], q, k)

    def query_batch(self, queries, k):
        rows = np.asarray(queries, dtype=np.float64)
        idx = np.empty((rows.shape[0], k), dtype=np.int64)
        for i, row in enumerate(rows):
            idx[i], _ = self.query(row, k)
        return idx


def choose_k(n_v, alpha, override=None):
    """
    k = round-half-to-even(sqrt(n_v)); raised to ceil(2/alpha - 1) (capped at n_v) when
    n_v < (2/alpha - 1)^2 so the adjusted quantile stays below the neighbourhood maximum.
    """
    if n_v < 1:
        raise DataError("KNN needs at least one calibration row")
    if override is not None:
        override = int(override)
        if not 1 <= override <= n_v:
            raise ConfigError("k override {} must lie in [1, {}]".format(override, n_v))
        return override
    k0 = int(np.rint(np.sqrt(n_v)))
    threshold = 2.0 / alpha - 1.0
    if n_v < threshold ** 2:
        k = min(n_v, max(k0, ceil_rank(threshold)))
        logger.info("Small calibration set ({} < {:.0f}): k raised from {} to {}".format(n_v, threshold ** 2, k0, k))
        return k
    return max(k0, 1)


@dataclass(frozen=True, eq=False)
class KnnCalibration:
    tree: KdTree
    errors: np.ndarray
    k: int
    alpha: float
    standardize: bool = False
    scale: np.ndarray = None
    rho: np.ndarray = None

    @property
    def n_v(self):
        return len(self.tree)

    def project(self, rho):
        arr = as_matrix(rho, 'rho', self.tree.points.shape[1])
        return arr / self.scale if self.standardize else arr

    def to_dict(self):
        return {
            'method': KNN,
            'k': self.k,
            'alpha': self.alpha,
            'metric': METRIC,
            'standardize': self.standardize,
            'rho': (self.rho if self.rho is not None else self.tree.points).tolist(),
            'scale': self.scale.tolist() if self.scale is not None else None,
            'errors': self.errors.tolist(),
        }


def _feature_scale(rho):
    scale = rho.std(axis=0)
    return np.where(scale > 0, scale, 1.0)


def knn_calibrate(cal, alpha, k_override=None, standardize=False):
    alpha = check_alpha(alpha)
    rho = np.asarray(cal.rho, dtype=np.float64)
    errors = np.asarray(cal.err, dtype=np.float64)
    if rho.shape[0] != errors.shape[0]:
        raise DimensionError("rho and err disagree on row count: {} vs {}".format(rho.shape[0], errors.shape[0]))
    k = choose_k(rho.shape[0], alpha, k_override)
    scale = _feature_scale(rho) if standardize else None
    tree = KdTree(rho / scale if standardize else rho)
    logger.info("KNN calibration over {} rows with k={}".format(rho.shape[0], k))
    return KnnCalibration(tree=tree, errors=errors, k=k, alpha=alpha, standardize=bool(standardize), scale=scale,
                          rho=rho)


def neighbour_rank(k, alpha):
    """ 1-indexed rank of the adjusted quantile among k neighbours, capped at k. """
    return min(max(ceil_rank((k + 1) * (1.0 - alpha)), 1), k)


def knn_half_widths(cal, rho):
    queries = cal.project(rho)
    if queries.shape[0] == 0:
        return np.empty((0, cal.errors.shape[1]), dtype=np.float64)
    idx = cal.tree.query_batch(queries, cal.k)
    neighbour_errors = np.sort(cal.errors[idx], axis=1)
    return neighbour_errors[:, neighbour_rank(cal.k, cal.alpha) - 1, :]


def knn_interval_width(cal, rho_row):
    row = np.asarray(rho_row, dtype=np.float64).ravel()
    return knn_half_widths(cal, row.reshape(1, -1))[0]


def knn_intervals(cal, predictions, rho):
    pred = as_matrix(predictions, 'predictions', cal.errors.shape[1])
    widths = knn_half_widths(cal, rho)
    if widths.shape[0] != pred.shape[0]:
        raise DimensionError("rho has {} rows for {} predictions".format(widths.shape[0], pred.shape[0]))
    return IntervalBatch.symmetric(pred, widths, cal.alpha, KNN)


def save_knn(path, cal):
    write_json(path, cal.to_dict())


def load_knn(path):
    """ The tree is rebuilt from the stored raw rho rows and feature scale. """
    payload = read_json(path)
    rho = np.asarray(payload['rho'], dtype=np.float64)
    standardize = bool(payload.get('standardize', False))
    scale = None
    if standardize:
        stored = payload.get('scale')
        scale = np.asarray(stored, dtype=np.float64) if stored is not None else _feature_scale(rho)
    return KnnCalibration(tree=KdTree(rho / scale if standardize else rho),
                          errors=np.asarray(payload['errors'], dtype=np.float64),
                          k=int(payload['k']), alpha=float(payload['alpha']),
                          standardize=standardize, scale=scale, rho=rho)
