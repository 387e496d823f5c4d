"""
Gaussian copula prediction intervals.

Reconstruction errors (rho) and prediction errors (e) are mapped column by column to
normal scores through their empirical CDFs, a joint Gaussian is fitted over
[rho* | e*], and each output's half-width is the (1 - alpha) quantile of the
conditional marginal of e*_j given rho*, mapped back through the inverse ECDF of e_j.
"""
from dataclasses import dataclass, field

import numpy as np

from . import logger
from .conformal import IntervalBatch, check_alpha
from .exceptions import DataError, DimensionError
from .statcore import (DEFAULT_RIDGE, EmpiricalCdf, MultivariateGaussian, ecdf_eval, ecdf_fit, ecdf_quantile,
                       gauss_fit, norm_cdf, norm_quantile)
from .util import as_matrix, read_json, write_json

COPULA = 'copula'


def pool_rho(rho, n_channels):
    """
    Mean of channel-major feature-wise errors over window steps, one column per channel.
    """
    arr = np.asarray(rho, dtype=np.float64)
    if arr.shape[1] % n_channels:
        raise DimensionError("{} rho columns cannot be pooled over {} channels".format(arr.shape[1], n_channels))
    return arr.reshape(arr.shape[0], n_channels, -1).mean(axis=2)


@dataclass(frozen=True, eq=False)
class CopulaCalibration:
    rho_cdfs: list
    err_cdfs: list
    joint: MultivariateGaussian
    alpha: float
    pool_channels: int = None
    rho_conditioner: object = field(default=None, repr=False)

    def __post_init__(self):
        # built once; the calibration is read-only afterwards
        if self.rho_conditioner is None:
            object.__setattr__(self, 'rho_conditioner', self.joint.conditioner(range(self.n_rho)))

    @property
    def n_rho(self):
        return len(self.rho_cdfs)

    @property
    def n_err(self):
        return len(self.err_cdfs)

    def rho_block(self, rho):
        """ Raw rho rows -> normal scores of the (optionally pooled) rho block. """
        arr = np.asarray(rho, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if self.pool_channels:
            arr = pool_rho(arr, self.pool_channels)
        if arr.shape[1] != self.n_rho:
            raise DimensionError("rho has {} columns, calibration expects {}".format(arr.shape[1], self.n_rho))
        return normal_scores(self.rho_cdfs, arr)

    def to_dict(self):
        return {
            'method': COPULA,
            'alpha': self.alpha,
            'pool_channels': self.pool_channels,
            'block_sizes': {'rho': self.n_rho, 'err': self.n_err},
            'rho_cdfs': [c.to_list() for c in self.rho_cdfs],
            'err_cdfs': [c.to_list() for c in self.err_cdfs],
            'joint': self.joint.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(rho_cdfs=[EmpiricalCdf(np.asarray(s, dtype=np.float64)) for s in payload['rho_cdfs']],
                   err_cdfs=[EmpiricalCdf(np.asarray(s, dtype=np.float64)) for s in payload['err_cdfs']],
                   joint=MultivariateGaussian.from_dict(payload['joint']),
                   alpha=float(payload['alpha']),
                   pool_channels=payload.get('pool_channels'))


def normal_scores(cdfs, values):
    """
    Phi^-1(F_j(values[:, j])) for every column j.
    """
    out = np.empty(values.shape, dtype=np.float64)
    for j, cdf in enumerate(cdfs):
        out[:, j] = norm_quantile(ecdf_eval(cdf, values[:, j]))
    return out


def copula_calibrate(cal, alpha, ridge=DEFAULT_RIDGE, pool_channels=None):
    """
    :param cal: CalibrationErrors of the held-out set.
    :param pool_channels: pool rho over window steps into this many channel columns first.
    """
    alpha = check_alpha(alpha)
    rho = np.asarray(cal.rho, dtype=np.float64)
    err = np.asarray(cal.err, dtype=np.float64)
    if rho.shape[0] != err.shape[0]:
        raise DimensionError("rho and err disagree on row count: {} vs {}".format(rho.shape[0], err.shape[0]))
    if rho.shape[0] < 2:
        raise DataError("Copula calibration needs at least 2 rows, got {}".format(rho.shape[0]))
    if pool_channels:
        rho = pool_rho(rho, pool_channels)

    rho_cdfs = [ecdf_fit(rho[:, j]) for j in range(rho.shape[1])]
    err_cdfs = [ecdf_fit(err[:, j]) for j in range(err.shape[1])]
    transformed = np.hstack([normal_scores(rho_cdfs, rho), normal_scores(err_cdfs, err)])
    joint = gauss_fit(transformed, ridge=ridge)
    logger.info("Copula fitted on {} rows over {} rho and {} error columns".format(
        rho.shape[0], rho.shape[1], err.shape[1]))
    return CopulaCalibration(rho_cdfs=rho_cdfs, err_cdfs=err_cdfs, joint=joint, alpha=alpha,
                             pool_channels=pool_channels or None)


def conditional_moments(cal, rho):
    """
    Mean (n x O) and standard deviation (O,) of e* given the rho rows.
    """
    rho_star = cal.rho_block(rho)
    conditioner = cal.rho_conditioner
    means = conditioner.conditional_means(rho_star)
    sd = np.sqrt(np.diag(conditioner.covariance))
    return means, sd


def conditional_quantile(cal, rho):
    """ The (1 - alpha) quantile of each e*_j given rho, in normal-score units. """
    means, sd = conditional_moments(cal, rho)
    return means + norm_quantile(1.0 - cal.alpha) * sd


def conditional_cdf(cal, rho, err_star):
    """ Conditional Gaussian CDF of normal-score errors err_star given rho. """
    means, sd = conditional_moments(cal, rho)
    z = np.asarray(err_star, dtype=np.float64).reshape(means.shape)
    with np.errstate(divide='ignore', invalid='ignore'):
        standardized = (z - means) / sd
    standardized = np.where(sd > 0, standardized, np.where(z >= means, np.inf, -np.inf))
    return norm_cdf(standardized)


def copula_half_widths(cal, rho):
    eps_star = conditional_quantile(cal, rho)
    probs = norm_cdf(eps_star)
    widths = np.empty(eps_star.shape, dtype=np.float64)
    for j, cdf in enumerate(cal.err_cdfs):
        widths[:, j] = ecdf_quantile(cdf, probs[:, j])
    return widths


def copula_interval_width(cal, rho_row):
    row = np.asarray(rho_row, dtype=np.float64).ravel()
    if not np.all(np.isfinite(row)) or np.any(row < 0):
        raise DataError("rho entries must be finite and nonnegative")
    return copula_half_widths(cal, row.reshape(1, -1))[0]


def copula_intervals(cal, predictions, rho):
    pred = as_matrix(predictions, 'predictions', cal.n_err)
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape[0] != pred.shape[0]:
        raise DimensionError("rho has {} rows for {} predictions".format(rho.shape[0], pred.shape[0]))
    if pred.shape[0] == 0:
        return IntervalBatch.symmetric(pred, 0.0, cal.alpha, COPULA)
    return IntervalBatch.symmetric(pred, copula_half_widths(cal, rho), cal.alpha, COPULA)


def copula_score(cal, rho, err):
    """
    Conformal-score view: Phi((e* - mu) / sd) per output, with e* the normal score of err.
    """
    err = np.asarray(err, dtype=np.float64)
    single = err.ndim == 1
    err = err.reshape(1, -1) if single else err
    if err.shape[1] != cal.n_err:
        raise DimensionError("err has {} columns, calibration expects {}".format(err.shape[1], cal.n_err))
    scores = conditional_cdf(cal, rho, normal_scores(cal.err_cdfs, err))
    return scores[0] if single else scores


def save_copula(path, cal):
    write_json(path, cal.to_dict())


def load_copula(path):
    return CopulaCalibration.from_dict(read_json(path))
