import os
import sys

import numpy as np
import pandas as pd
import pytest

modules_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(modules_path, 'src'))

from ruepi.conformal import IntervalBatch
from ruepi.evalmetrics import (POOLED, aggregate_reports, aurc, build_report, covp, cwfdc, minmax_normalize,
                               output_ranges, picp, pinafd, pinaw, sigma_risk, uncertainty_metrics)


def batch(lower, upper):
    return IntervalBatch(lower=np.asarray(lower, dtype=float).reshape(-1, 1),
                         upper=np.asarray(upper, dtype=float).reshape(-1, 1), alpha=0.05, method='m')


class TestIntervalMetrics(object):
    def test_picp(self):
        y = np.array([1.0, 2.0, 3.0])
        assert picp(y.reshape(-1, 1), batch([0, 0, 2], [2, 1, 4]))[0] == pytest.approx(2 / 3.0)

    def test_picp_infinite_and_inclusive(self):
        y = np.array([[1.0], [5.0]])
        assert picp(y, batch([-np.inf, -np.inf], [np.inf, np.inf]))[0] == 1.0
        assert picp(y, batch([1.0, 5.0], [1.0, 5.0]))[0] == 1.0

    def test_covp(self):
        assert covp(0.951, 0.05) == pytest.approx(0.0, abs=1e-15)
        assert covp(0.90, 0.05) == pytest.approx(0.002601)
        assert covp(1.0, 0.05) == pytest.approx(0.002401)

    def test_pinaw(self):
        b = batch([0, 0, 0], [2, 2, 2])
        assert pinaw(b, 4.0)[0] == pytest.approx(0.5)
        assert pinaw(b, 8.0)[0] == pytest.approx(0.25)
        assert pinaw(batch([1, 1], [1, 1]), 4.0)[0] == 0.0

    def test_pinafd(self):
        y = np.array([[5.0], [3.0]])
        assert pinafd(y, batch([2, 2], [4, 4]), 4.0)[0] == pytest.approx(0.25)
        assert pinafd(np.array([[4.0]]), batch([2], [4]), 4.0)[0] == 0.0
        assert pinafd(np.array([[3.0]]), batch([2], [4]), 4.0)[0] == 0.0

    def test_cwfdc(self):
        assert cwfdc(0.5, 0.0, 0.0) == pytest.approx(0.5)
        assert cwfdc(0.5, 0.25, 0.002601) == pytest.approx(3.351)
        assert cwfdc(0.5, 0.25, 0.002601, beta=0.0) == pytest.approx(0.75)


class TestUncertaintyMetrics(object):
    def test_aurc(self):
        assert aurc([0.0, 1.0], [0.0, 1.0]) == pytest.approx(0.25)
        assert aurc([2.0] * 5, [3, 1, 4, 1, 5]) == pytest.approx(2.0)

    def test_aurc_prefers_aligned_ordering(self):
        losses = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        assert aurc(losses, losses) <= aurc(losses, -losses)

    def test_sigma_risk_degenerate_range(self):
        risk = sigma_risk([1.0, 2.0, 6.0], [0.3, 0.3, 0.3], (0.1,))
        assert risk[0.1] == pytest.approx(3.0)

    def test_sigma_risk_drops_outlier(self):
        unc = np.append(np.arange(10.0), 1000.0)
        risk = sigma_risk(unc, unc, (0.1, 1.0))
        assert risk[0.1] == 0.0
        assert risk[1.0] == pytest.approx(4.5)

    def test_bundle(self):
        rng = np.random.default_rng(0)
        unc = rng.uniform(size=100)
        metrics = uncertainty_metrics(unc + 0.01 * rng.normal(size=100), unc, correlation='spearman')
        assert metrics.correlation > 0.9
        assert set(metrics.to_dict()['sigma_risk']) == {'0.1', '0.2'}

    def test_undefined_correlation_is_none(self):
        metrics = uncertainty_metrics([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
        assert metrics.to_dict()['correlation'] is None


class TestReport(object):
    def make_methods(self, y):
        return {name: IntervalBatch.symmetric(y, half, 0.05, name)
                for name, half in (('narrow', 0.5), ('mid', 1.0), ('wide', 1.5))}

    def test_normalized_view(self):
        y = np.random.default_rng(1).normal(size=(20, 2))
        report = build_report(self.make_methods(y), y, output_ranges(y), 0.05)
        frame = report.to_frame()
        pooled = frame[(frame['output'] == POOLED) & (frame['horizon'] == POOLED) & (frame['metric'] == 'pinaw')]
        normalized = dict(zip(pooled['method'], pooled['normalized_value']))
        assert normalized == pytest.approx({'narrow': 0.0, 'mid': 0.5, 'wide': 1.0})

    def test_rows_per_output(self):
        y = np.random.default_rng(2).normal(size=(10, 4))
        index = [('a', 1), ('a', 2), ('b', 1), ('b', 2)]
        methods = {'m': IntervalBatch.symmetric(y, 1.0, 0.05, 'm')}
        report = build_report(methods, y, np.ones(4), 0.05, output_index=index)
        keys = [(r.output, r.horizon) for r in report.rows]
        assert keys == [('a', '1'), ('a', '2'), ('b', '1'), ('b', '2'), (POOLED, '1'), (POOLED, '2'),
                        (POOLED, POOLED)]

    def test_identical_methods(self):
        y = np.random.default_rng(3).normal(size=(10, 1))
        b = IntervalBatch.symmetric(y + 0.3, 1.0, 0.05, 'x')
        report = build_report({'a': b, 'b': b}, y, [2.0], 0.05)
        rows = {r.method: (r.picp, r.pinaw, r.pinafd, r.cwfdc) for r in report.rows if r.output == POOLED}
        assert rows['a'] == rows['b']

    def test_save_and_aggregate(self, tmp_path):
        y = np.random.default_rng(4).normal(size=(15, 2))
        frames = [build_report(self.make_methods(y), y, output_ranges(y), 0.05).save(str(tmp_path / str(s)))
                  for s in range(2)]
        assert (tmp_path / '0' / 'report.json').exists()
        summary = aggregate_reports(frames)
        assert (summary['n_seeds'] == 2).all()
        assert (summary['std'] == 0.0).all()
        reloaded = pd.read_csv(str(tmp_path / '0' / 'report.csv'), dtype={'horizon': str})
        assert list(reloaded.columns) == ['method', 'output', 'horizon', 'metric', 'value', 'normalized_value']

    def test_minmax_normalize(self):
        np.testing.assert_array_equal(minmax_normalize([2.0, 2.0]), [0.0, 0.0])
        np.testing.assert_array_equal(minmax_normalize([1.0, np.inf, 3.0]), [0.0, 1.0, 1.0])
