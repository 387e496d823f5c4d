"""
Split and normalized conformal prediction, calibrated independently per output column.
"""
from dataclasses import dataclass

import numpy as np

from . import logger
from .exceptions import ConfigError, DataError, DimensionError
from .statcore import ceil_rank
from .util import as_matrix, read_json, write_json

SPLIT_CP = 'split_cp'
NORMALIZED_CP = 'normalized_cp'


def check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1), got {}".format(alpha))
    return float(alpha)


@dataclass(frozen=True, eq=False)
class IntervalBatch:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    method: str
    prediction: np.ndarray = None

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise DimensionError("Interval bounds differ in shape: {} vs {}".format(self.lower.shape, self.upper.shape))
        if np.any(self.lower > self.upper):
            raise DataError("Interval lower bound exceeds upper bound for method '{}'".format(self.method))

    @classmethod
    def symmetric(cls, predictions, half_width, alpha, method):
        """
        [prediction - half_width, prediction + half_width]; half_width broadcasts against predictions.
        """
        pred = np.asarray(predictions, dtype=np.float64)
        eps = np.broadcast_to(np.asarray(half_width, dtype=np.float64), pred.shape)
        return cls(lower=pred - eps, upper=pred + eps, alpha=float(alpha), method=method, prediction=pred)

    @property
    def shape(self):
        return self.lower.shape

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def half_width(self):
        return 0.5 * self.width


def adjusted_quantile(scores, alpha):
    """
    The ceil((m+1)(1-alpha))-th smallest of m scores.

    Returns +inf when that rank exceeds m; the calibration set is too small to certify coverage.
    """
    values = np.asarray(scores, dtype=np.float64).ravel()
    m = values.size
    if m == 0:
        raise DataError("Adjusted quantile of an empty score set")
    rank = ceil_rank((m + 1) * (1.0 - alpha))
    if rank > m:
        logger.warning("Insufficient calibration data: rank {} exceeds {} scores at alpha={}, width is infinite".format(
            rank, m, alpha))
        return np.inf
    rank = max(rank, 1)
    return float(np.partition(values, rank - 1)[rank - 1])


@dataclass(frozen=True, eq=False)
class SplitCpCalibration:
    q_hat: np.ndarray
    alpha: float
    n_cal: int
    method = SPLIT_CP

    def to_dict(self):
        return {'method': self.method, 'alpha': self.alpha, 'q_hat': _encode(self.q_hat), 'n_cal': self.n_cal}


@dataclass(frozen=True, eq=False)
class NormalizedCpCalibration:
    q_hat: np.ndarray
    alpha: float
    n_cal: int
    method = NORMALIZED_CP

    def to_dict(self):
        return {'method': self.method, 'alpha': self.alpha, 'q_hat': _encode(self.q_hat), 'n_cal': self.n_cal}


def _encode(q_hat):
    # JSON has no infinity literal; the sentinel is written as a string.
    return [v if np.isfinite(v) else 'inf' for v in q_hat.tolist()]


def _decode(values):
    return np.array([np.inf if v == 'inf' else float(v) for v in values], dtype=np.float64)


def _per_output_quantiles(scores, alpha):
    return np.array([adjusted_quantile(scores[:, j], alpha) for j in range(scores.shape[1])], dtype=np.float64)


def split_cp_calibrate(errors, alpha):
    alpha = check_alpha(alpha)
    err = as_matrix(errors, 'errors')
    if err.shape[0] < 1:
        raise DataError("Split CP needs at least one calibration row")
    return SplitCpCalibration(q_hat=_per_output_quantiles(err, alpha), alpha=alpha, n_cal=err.shape[0])


def split_cp_intervals(cal, predictions):
    pred = as_matrix(predictions, 'predictions', cal.q_hat.shape[0])
    return IntervalBatch.symmetric(pred, cal.q_hat[np.newaxis, :], cal.alpha, SPLIT_CP)


def _check_sigma(sigma, n):
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.shape[0] != n:
        raise DimensionError("sigma has {} entries for {} rows".format(s.shape[0], n))
    if np.any(~(s > 0.0)):
        raise DataError("Normalized CP needs strictly positive sigma; {} entries are not".format(int(np.sum(~(s > 0.0)))))
    return s


def normalized_cp_calibrate(errors, sigma, alpha):
    alpha = check_alpha(alpha)
    err = as_matrix(errors, 'errors')
    if err.shape[0] < 1:
        raise DataError("Normalized CP needs at least one calibration row")
    s = _check_sigma(sigma, err.shape[0])
    scores = err / s[:, np.newaxis]
    return NormalizedCpCalibration(q_hat=_per_output_quantiles(scores, alpha), alpha=alpha, n_cal=err.shape[0])


def normalized_cp_intervals(cal, predictions, sigma):
    pred = as_matrix(predictions, 'predictions', cal.q_hat.shape[0])
    s = _check_sigma(sigma, pred.shape[0])
    return IntervalBatch.symmetric(pred, s[:, np.newaxis] * cal.q_hat[np.newaxis, :], cal.alpha, NORMALIZED_CP)


def save_calibration(path, cal):
    write_json(path, cal.to_dict())


def load_calibration(path):
    payload = read_json(path)
    kinds = {SPLIT_CP: SplitCpCalibration, NORMALIZED_CP: NormalizedCpCalibration}
    if payload.get('method') not in kinds:
        raise DataError("Unknown calibration method '{}' in {}".format(payload.get('method'), path))
    return kinds[payload['method']](q_hat=_decode(payload['q_hat']), alpha=float(payload['alpha']),
                                    n_cal=int(payload['n_cal']))
