"""
Statistical primitives shared by the interval methods.

Empirical CDFs use the rank/(n+1) convention so that composing them with the
standard-normal quantile never hits the infinite tails.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special, stats

from . import logger
from .exceptions import DimensionError, SingularCovarianceError, UndefinedStatisticError

DEFAULT_RIDGE = 1e-6

# Guards ceil() of ranks against products such as 20 * 0.95 landing a hair above an integer.
RANK_TOLERANCE = 1e-9


def ceil_rank(x):
    return int(np.ceil(x - RANK_TOLERANCE))


@dataclass(frozen=True, eq=False)
class EmpiricalCdf:
    sorted_samples: np.ndarray

    @property
    def n(self):
        return self.sorted_samples.shape[0]

    def to_list(self):
        return self.sorted_samples.tolist()


def ecdf_fit(samples):
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size == 0:
        raise UndefinedStatisticError("Cannot fit an empirical CDF to an empty sample")
    if not np.all(np.isfinite(values)):
        raise UndefinedStatisticError("Empirical CDF samples must be finite")
    return EmpiricalCdf(sorted_samples=np.sort(values, kind='mergesort'))


def ecdf_eval(cdf, x):
    """
    count(samples <= x) / (n + 1), clamped to [1/(n+1), n/(n+1)].

    Accepts a scalar or an array of query points.
    """
    n = cdf.n
    counts = np.searchsorted(cdf.sorted_samples, x, side='right')
    probs = np.clip(counts, 1, n) / float(n + 1)
    return float(probs) if np.ndim(probs) == 0 else probs


def ecdf_quantile(cdf, q):
    """
    Nearest-rank inverse: sorted_samples[ceil(q * n)] (1-indexed), rank clamped to [1, n].
    """
    n = cdf.n
    ranks = np.ceil(np.asarray(q, dtype=np.float64) * n - RANK_TOLERANCE).astype(np.int64)
    ranks = np.clip(ranks, 1, n)
    values = cdf.sorted_samples[ranks - 1]
    return float(values) if np.ndim(values) == 0 else values


def norm_cdf(z):
    out = special.ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def norm_quantile(p):
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise UndefinedStatisticError("Normal quantile is only defined on (0, 1)")
    out = special.ndtri(arr)
    return float(out) if np.ndim(out) == 0 else out


class _Conditioner(object):
    """
    Gain and conditional covariance for one observed index set.
    """

    def __init__(self, joint, observed_idx):
        d = joint.dim
        self.observed_idx = np.asarray(observed_idx, dtype=np.int64)
        mask = np.ones(d, dtype=bool)
        mask[self.observed_idx] = False
        self.free_idx = np.flatnonzero(mask)

        cov = joint.covariance
        s_oo = cov[np.ix_(self.observed_idx, self.observed_idx)]
        s_uo = cov[np.ix_(self.free_idx, self.observed_idx)]
        s_uu = cov[np.ix_(self.free_idx, self.free_idx)]
        try:
            factor = linalg.cho_factor(s_oo, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            condition = float(np.linalg.cond(s_oo))
            msg = "Observed covariance block is not positive definite (condition estimate {:.3e})".format(condition)
            logger.warning(msg)
            raise SingularCovarianceError(msg, condition=condition)

        self.gain = linalg.cho_solve(factor, s_uo.T).T
        cond_cov = s_uu - self.gain @ s_uo.T
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        diag = np.clip(np.diag(cond_cov), 0.0, np.diag(s_uu))
        np.fill_diagonal(cond_cov, diag)
        self.covariance = cond_cov
        self.mean_free = joint.mean[self.free_idx]
        self.mean_observed = joint.mean[self.observed_idx]

    def conditional_means(self, observed_vals):
        """
        Vectorized over rows: observed_vals has shape (n, |observed|) or (|observed|,).
        """
        vals = np.asarray(observed_vals, dtype=np.float64)
        return self.mean_free + (vals - self.mean_observed) @ self.gain.T


@dataclass(frozen=True, eq=False)
class MultivariateGaussian:
    mean: np.ndarray
    covariance: np.ndarray
    ridge: float = 0.0

    @property
    def dim(self):
        return self.mean.shape[0]

    def conditioner(self, observed_idx):
        """ A new conditioner for the index set; callers that condition repeatedly keep it. """
        return _Conditioner(self, tuple(int(i) for i in observed_idx))

    def to_dict(self):
        return {
            'mean': self.mean.tolist(),
            'covariance': self.covariance.tolist(),
            'ridge': self.ridge,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(mean=np.asarray(payload['mean'], dtype=np.float64),
                   covariance=np.asarray(payload['covariance'], dtype=np.float64),
                   ridge=float(payload['ridge']))


def gauss_fit(samples, ridge=DEFAULT_RIDGE):
    """
    Column means and unbiased covariance plus ridge * I.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("Gaussian fit expects an n x d matrix, got shape {}".format(x.shape))
    if x.shape[0] < 2:
        raise UndefinedStatisticError("Gaussian fit needs at least 2 rows, got {}".format(x.shape[0]))
    if ridge < 0:
        raise UndefinedStatisticError("Ridge must be nonnegative, got {}".format(ridge))
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(x.shape[1])
    return MultivariateGaussian(mean=mean, covariance=cov, ridge=float(ridge))


def gauss_condition(joint, observed_idx, observed_vals):
    """
    Distribution of the unobserved coordinates given the observed ones.

    The returned Gaussian is ordered like the unobserved indices in ascending order.
    """
    observed_idx = [int(i) for i in observed_idx]
    if not observed_idx:
        return joint
    if len(set(observed_idx)) != len(observed_idx):
        raise DimensionError("Observed indices must be distinct: {}".format(observed_idx))
    if min(observed_idx) < 0 or max(observed_idx) >= joint.dim:
        raise DimensionError("Observed indices out of range for dimension {}".format(joint.dim))
    vals = np.asarray(observed_vals, dtype=np.float64).ravel()
    if vals.shape[0] != len(observed_idx):
        raise DimensionError("Got {} observed values for {} indices".format(vals.shape[0], len(observed_idx)))

    cond = joint.conditioner(observed_idx)
    return MultivariateGaussian(mean=cond.conditional_means(vals), covariance=cond.covariance.copy(),
                                ridge=joint.ridge)


def _check_pair(a, b):
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError("Correlation inputs differ in length: {} vs {}".format(x.size, y.size))
    if x.size < 2:
        raise UndefinedStatisticError("Correlation needs at least 2 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedStatisticError("Correlation is undefined for a zero-variance input")
    return x, y


def pearson(a, b):
    x, y = _check_pair(a, b)
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def spearman(a, b):
    x, y = _check_pair(a, b)
    return float(stats.spearmanr(x, y)[0])
