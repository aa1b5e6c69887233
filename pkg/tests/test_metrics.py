import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nilmadv import metrics
from nilmadv.data import NormStats
from nilmadv.nn import FULL_WINDOW, MIDPOINT

watts = arrays(np.float64, 20, elements=st.floats(0, 3000))


def test_mae_examples():
    assert metrics.mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metrics.mae([0.0, 10.0], [10.0, 0.0]) == 10.0


def test_nde_examples():
    assert metrics.nde([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert metrics.nde([0.0, 0.0, 0.0], [1.0, 5.0, 2.0]) == 1.0
    assert metrics.nde([6.0, 8.0], [3.0, 4.0]) == 1.0
    with pytest.raises(metrics.MetricError):
        metrics.nde([1.0, 2.0], [0.0, 0.0])


def test_f1_examples():
    truth = [0, 600, 700, 0]
    assert metrics.f1(truth, truth, 500) == 1.0
    assert metrics.f1([0, 10, 20, 0], truth, 500) == 0.0
    # TP=2, FP=1, FN=1
    pred = [600, 600, 600, 0, 0]
    truth = [600, 600, 0, 600, 0]
    assert metrics.f1(pred, truth, 500) == pytest.approx(2 / 3, abs=1e-15)


def test_f1_threshold_boundary_is_on():
    assert metrics.f1([10.0], [10.0], 10.0) == 1.0
    assert metrics.f1([9.999], [10.0], 10.0) == 0.0


def test_threshold_must_be_positive():
    with pytest.raises(metrics.MetricError):
        metrics.StateThreshold(0.0)


def test_evaluate_bundles():
    truth = np.array([0.0, 2000.0, 2000.0, 0.0])
    assert metrics.evaluate(truth, truth, 500.0) == metrics.MetricsReport("", "clean", 0.0, 1.0, 0.0)
    r = metrics.evaluate(np.zeros(4), truth, 500.0)
    assert (r.mae, r.f1, r.nde) == (truth.mean(), 0.0, 1.0)


def test_report_row():
    r = metrics.MetricsReport("kettle", "fgsm@0.1", 5.4, 0.86, 0.38, model="seq2point")
    assert r.row() == ["seq2point", "kettle", "fgsm@0.1", "5.4", "0.86", "0.38"]
    with pytest.raises(metrics.MetricError):
        metrics.MetricsReport("k", "clean", -1.0, 0.5, 0.1)


class TestReconstruct:
    def test_no_overlap_concatenates(self):
        preds = np.arange(6, dtype=float).reshape(2, 3)
        s = metrics.reconstruct_series(preds, FULL_WINDOW, stride=3)
        assert s.values.tolist() == [0, 1, 2, 3, 4, 5]

    def test_overlap_mean(self):
        preds = np.array([[0.0, 10.0], [20.0, 0.0]])
        s = metrics.reconstruct_series(preds, FULL_WINDOW, stride=1)
        assert s.values.tolist() == [0.0, 15.0, 0.0]

    def test_constant(self):
        s = metrics.reconstruct_series(np.full((7, 5), 3.5), FULL_WINDOW, stride=1)
        assert np.all(s.values == 3.5) and len(s) == 11

    def test_midpoints_destandardized_and_clamped(self):
        s = metrics.reconstruct_series([1.0, -3.0, 0.5], MIDPOINT, stats=NormStats(100.0, 50.0))
        assert s.values.tolist() == [150.0, 0.0, 125.0]


@settings(max_examples=200)
@given(watts, watts, st.floats(0.01, 100))
def test_scale_invariance(pred, truth, c):
    if np.sum(truth**2) == 0:
        return
    assert metrics.nde(c * pred, c * truth) == pytest.approx(metrics.nde(pred, truth), rel=1e-9, abs=1e-12)
    assert metrics.mae(c * pred, c * truth) == pytest.approx(c * metrics.mae(pred, truth), rel=1e-9, abs=1e-12)


@settings(max_examples=200)
@given(watts, watts, st.floats(1, 2500))
def test_f1_monotone_transform_invariance(pred, truth, threshold):
    f = lambda v: np.ldexp(v, 3)  # exact power-of-two scaling keeps float order strictly
    assert metrics.f1(f(pred), f(truth), f(threshold)) == metrics.f1(pred, truth, threshold)


@given(watts, watts, st.floats(1, 2500))
def test_symmetry_and_ranges(pred, truth, threshold):
    assert metrics.mae(pred, truth) == metrics.mae(truth, pred)
    assert 0.0 <= metrics.f1(pred, truth, threshold) <= 1.0
    if np.sum(truth**2) > 0:
        assert metrics.nde(pred, truth) >= 0.0


def test_metric_inputs_validated():
    with pytest.raises(metrics.MetricError):
        metrics.mae([1.0], [1.0, 2.0])
    with pytest.raises(metrics.MetricError):
        metrics.mae([], [])
