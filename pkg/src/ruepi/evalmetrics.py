"""
Interval-quality metrics (PICP, CovP, PINAW, PINAFD, CWFDC) and uncertainty-quality
metrics (correlation, AURC, sigma-risk), plus the per-method comparison report.
"""
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import logger
from .conformal import IntervalBatch
from .exceptions import DataError, DimensionError
from .statcore import pearson, spearman
from .util import as_matrix, write_frame, write_json

DEFAULT_RHO_W = 1.0
DEFAULT_BETA = 1000.0
DEFAULT_SIGMA_LEVELS = (0.1, 0.2)
POOLED = 'all'
METRICS = ('picp', 'covp', 'pinaw', 'pinafd', 'cwfdc')


def _covered(y, intervals):
    y = as_matrix(y, 'y', intervals.shape[1])
    if y.shape != intervals.shape:
        raise DimensionError("targets {} and intervals {} differ in shape".format(y.shape, intervals.shape))
    return y, (y >= intervals.lower) & (y <= intervals.upper)


def _check_range(range_r, n_out):
    r = np.broadcast_to(np.asarray(range_r, dtype=np.float64), (n_out,))
    if np.any(~(r > 0)):
        raise DataError("Output range R must be positive, got {}".format(r.tolist()))
    return r


def picp(y, intervals):
    """ Share of targets inside [L, U], bounds inclusive, per output. """
    _, covered = _covered(y, intervals)
    if covered.shape[0] == 0:
        raise DataError("PICP of an empty batch")
    return covered.mean(axis=0)


def covp(picp_value, alpha, delta=None):
    """ (1 - alpha + delta - PICP)^2 with delta = alpha / 50 by default. """
    if delta is None:
        delta = alpha / 50.0
    return (1.0 - alpha + delta - np.asarray(picp_value, dtype=np.float64)) ** 2


def pinaw(intervals, range_r):
    r = _check_range(range_r, intervals.shape[1])
    return intervals.width.mean(axis=0) / r


def pinafd(y, intervals, range_r):
    """ Mean normalized distance of uncovered targets to the nearer bound; 0 when all are covered. """
    y, covered = _covered(y, intervals)
    r = _check_range(range_r, y.shape[1])
    dist = np.minimum(np.abs(y - intervals.upper), np.abs(intervals.lower - y))
    missed = ~covered
    n_missed = missed.sum(axis=0)
    total = np.where(missed, dist, 0.0).sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        out = np.where(n_missed > 0, total / (r * np.maximum(n_missed, 1)), 0.0)
    return out


def cwfdc(pinaw_value, pinafd_value, covp_value, rho_w=DEFAULT_RHO_W, beta=DEFAULT_BETA):
    return pinaw_value + rho_w * pinafd_value + beta * covp_value


def aurc(losses, uncertainties):
    """
    Mean over k = 1..n of the average loss of the k most confident instances
    (ascending uncertainty, ties by index).
    """
    loss = np.asarray(losses, dtype=np.float64).ravel()
    unc = np.asarray(uncertainties, dtype=np.float64).ravel()
    if loss.shape != unc.shape or loss.size == 0:
        raise DimensionError("AURC needs equal, nonzero lengths; got {} and {}".format(loss.size, unc.size))
    order = np.argsort(unc, kind='stable')
    risks = np.cumsum(loss[order]) / np.arange(1, loss.size + 1)
    return float(risks.mean())


def normalize_uncertainty(uncertainties):
    """
    Drop values above Q3 + 1.5 IQR, min-max scale the rest.

    :return: (kept mask, normalized values of the kept entries); a zero range maps to 0.
    """
    unc = np.asarray(uncertainties, dtype=np.float64).ravel()
    q1, q3 = np.percentile(unc, [25, 75])
    keep = unc <= q3 + 1.5 * (q3 - q1)
    kept = unc[keep]
    span = kept.max() - kept.min()
    normalized = (kept - kept.min()) / span if span > 0 else np.zeros_like(kept)
    return keep, normalized


def sigma_risk(losses, uncertainties, sigma_levels=DEFAULT_SIGMA_LEVELS):
    """
    Mean loss of instances whose normalized uncertainty is at most sigma; NaN when none qualify.
    """
    loss = np.asarray(losses, dtype=np.float64).ravel()
    unc = np.asarray(uncertainties, dtype=np.float64).ravel()
    if loss.shape != unc.shape or loss.size == 0:
        raise DimensionError("sigma-risk needs equal, nonzero lengths; got {} and {}".format(loss.size, unc.size))
    keep, normalized = normalize_uncertainty(unc)
    kept_loss = loss[keep]
    out = {}
    for sigma in sigma_levels:
        selected = normalized <= sigma
        out[float(sigma)] = float(kept_loss[selected].mean()) if selected.any() else float('nan')
    return out


@dataclass
class UncertaintyMetrics:
    correlation: float
    aurc: float
    sigma_risk: dict
    correlation_kind: str = 'pearson'

    def to_dict(self):
        payload = asdict(self)
        payload['sigma_risk'] = {str(k): (None if np.isnan(v) else v) for k, v in self.sigma_risk.items()}
        if np.isnan(self.correlation):
            payload['correlation'] = None
        return payload


def uncertainty_metrics(losses, uncertainties, sigma_levels=DEFAULT_SIGMA_LEVELS, correlation='pearson'):
    corr_fn = spearman if correlation == 'spearman' else pearson
    try:
        corr = corr_fn(uncertainties, losses)
    except ValueError as e:
        logger.warning("Correlation undefined: {}".format(e))
        corr = float('nan')
    return UncertaintyMetrics(correlation=corr, aurc=aurc(losses, uncertainties),
                              sigma_risk=sigma_risk(losses, uncertainties, sigma_levels), correlation_kind=correlation)


@dataclass
class PiMetrics:
    method: str
    output: str
    horizon: str
    picp: float
    covp: float
    pinaw: float
    pinafd: float
    cwfdc: float


def _metrics_row(method, output, horizon, y, intervals, r, alpha, delta, rho_w, beta):
    """ Metrics of a column block, treating every (row, column) entry as one point. """
    lower, upper = intervals.lower, intervals.upper
    covered = (y >= lower) & (y <= upper)
    p = float(covered.mean())
    width = float(((upper - lower) / r).mean())
    dist = np.minimum(np.abs(y - upper), np.abs(lower - y)) / r
    missed = ~covered
    fd = float(dist[missed].mean()) if missed.any() else 0.0
    cp = float(covp(p, alpha, delta))
    return PiMetrics(method=method, output=str(output), horizon=str(horizon), picp=p, covp=cp, pinaw=width,
                     pinafd=fd, cwfdc=float(cwfdc(width, fd, cp, rho_w, beta)))


@dataclass
class PiReport:
    rows: list
    alpha: float
    rho_w: float = DEFAULT_RHO_W
    beta: float = DEFAULT_BETA
    uncertainty: dict = field(default_factory=dict)

    def to_frame(self):
        """
        Long format: method, output, horizon, metric, value, normalized_value.

        normalized_value is the min-max of value across methods within each
        (output, horizon, metric) group.
        """
        records = []
        for row in self.rows:
            for metric in METRICS:
                records.append({'method': row.method, 'output': row.output, 'horizon': row.horizon,
                                'metric': metric, 'value': getattr(row, metric)})
        frame = pd.DataFrame.from_records(records, columns=['method', 'output', 'horizon', 'metric', 'value'])
        frame['normalized_value'] = frame.groupby(['output', 'horizon', 'metric'], sort=False)['value'] \
            .transform(minmax_normalize)
        return frame

    def save(self, directory):
        frame = self.to_frame()
        write_frame(os.path.join(directory, 'report.csv'), frame)
        write_json(os.path.join(directory, 'report.json'), {
            'alpha': self.alpha,
            'rho_w': self.rho_w,
            'beta': self.beta,
            'rows': [_json_safe(asdict(r)) for r in self.rows],
            'uncertainty': self.uncertainty,
        })
        return frame


def _json_safe(payload):
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in payload.items()}


def minmax_normalize(values):
    """ Finite values mapped to [0, 1]; infinite values to 1; a zero range to 0. """
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    out = np.ones_like(v)
    if finite.any():
        lo, hi = v[finite].min(), v[finite].max()
        out[finite] = (v[finite] - lo) / (hi - lo) if hi > lo else 0.0
    return out


def build_report(methods, y, ranges, alpha, output_index=None, delta=None, rho_w=DEFAULT_RHO_W, beta=DEFAULT_BETA):
    """
    :param methods: method name -> IntervalBatch, all of the same shape as y.
    :param ranges: per-output range R.
    :param output_index: (output name, horizon) of every column; defaults to (column, 1).
    :return: PiReport with one row per method x column, per method x horizon pooled over
        outputs, and per method pooled over everything.
    """
    if not methods:
        raise DataError("No interval batches to report on")
    y = np.asarray(y, dtype=np.float64)
    shapes = {name: batch.shape for name, batch in methods.items()}
    if any(s != y.shape for s in shapes.values()):
        raise DimensionError("Interval batches {} do not match targets {}".format(shapes, y.shape))
    if output_index is None:
        output_index = [(str(j), 1) for j in range(y.shape[1])]
    r = _check_range(ranges, y.shape[1])
    horizons = sorted(set(h for _, h in output_index))

    rows = []
    for name in sorted(methods):
        batch = methods[name]
        for j, (output, horizon) in enumerate(output_index):
            rows.append(_metrics_row(name, output, horizon, y[:, [j]], _columns(batch, [j]), r[[j]],
                                     alpha, delta, rho_w, beta))
        for horizon in horizons:
            cols = [j for j, (_, h) in enumerate(output_index) if h == horizon]
            rows.append(_metrics_row(name, POOLED, horizon, y[:, cols], _columns(batch, cols), r[cols],
                                     alpha, delta, rho_w, beta))
        rows.append(_metrics_row(name, POOLED, POOLED, y, batch, r, alpha, delta, rho_w, beta))
    return PiReport(rows=rows, alpha=alpha, rho_w=rho_w, beta=beta)


def _columns(batch, cols):
    return IntervalBatch(lower=batch.lower[:, cols], upper=batch.upper[:, cols], alpha=batch.alpha, method=batch.method)


def output_ranges(y):
    """ max - min of every target column. """
    y = np.asarray(y, dtype=np.float64)
    return y.max(axis=0) - y.min(axis=0)


def aggregate_reports(frames):
    """
    Mean and population std of each metric across seed runs.
    """
    stacked = pd.concat(frames, axis=0, ignore_index=True)
    grouped = stacked.groupby(['method', 'output', 'horizon', 'metric'], sort=False)
    out = grouped.agg(mean=('value', 'mean'), std=('value', lambda v: float(np.std(v.to_numpy()))),
                      normalized_mean=('normalized_value', 'mean'), n_seeds=('value', 'size')).reset_index()
    return out
