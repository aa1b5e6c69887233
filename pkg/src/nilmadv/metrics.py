"""MAE / NDE / F1 evaluation and reconstruction of per-sample predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormStats, PowerSeries, destandardize
from .nn import FULL_WINDOW, MIDPOINT

CSV_HEADER = ("model", "appliance", "scenario", "mae", "f1", "nde")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class StateThreshold:
    watts: float

    def __post_init__(self):
        if not self.watts > 0:
            raise MetricError(f"state threshold must be > 0 W, got {self.watts}")


@dataclass(frozen=True)
class MetricsReport:
    appliance: str
    scenario: str
    mae: float
    f1: float
    nde: float
    model: str = ""

    def __post_init__(self):
        if self.mae < 0 or self.nde < 0 or not 0.0 <= self.f1 <= 1.0:
            raise MetricError(f"metrics out of range: {self}")

    def row(self) -> list[str]:
        return [self.model, self.appliance, self.scenario] + [
            f"{v:.10g}" for v in (self.mae, self.f1, self.nde)
        ]


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    truth = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise MetricError(f"pred {pred.shape} and truth {truth.shape} must be equal-length 1-d")
    if len(pred) == 0:
        raise MetricError("cannot score empty series")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def nde(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    denom = float(np.sum(truth * truth))
    if denom == 0:
        raise MetricError("NDE undefined for an all-zero ground truth")
    return float(np.sqrt(np.sum((pred - truth) ** 2) / denom))


def f1(pred, truth, threshold) -> float:
    """Per-sample F1 of ON states (value >= threshold). 0 when there are no true positives."""
    pred, truth = _pair(pred, truth)
    watts = threshold.watts if isinstance(threshold, StateThreshold) else StateThreshold(threshold).watts
    p_on = pred >= watts
    t_on = truth >= watts
    tp = int(np.count_nonzero(p_on & t_on))
    if tp == 0:
        return 0.0
    fp = int(np.count_nonzero(p_on & ~t_on))
    fn = int(np.count_nonzero(~p_on & t_on))
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def evaluate(pred, truth, threshold, appliance: str = "", scenario: str = "clean", model: str = ""):
    return MetricsReport(
        appliance=appliance,
        scenario=scenario,
        mae=mae(pred, truth),
        f1=f1(pred, truth, threshold),
        nde=nde(pred, truth),
        model=model,
    )


def reconstruct_series(
    predictions,
    output_mode: str,
    stride: int = 1,
    stats: NormStats | None = None,
    start_time: float = 0.0,
    period: float = 30.0,
    window_len: int | None = None,
) -> PowerSeries:
    """Turn per-window predictions into one series in watts.

    Midpoint predictions are concatenated; ``start_time`` should then be the
    time of the first window's midpoint. Full-window predictions are averaged
    wherever windows overlap. Negative watts are clamped to 0.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if stride < 1:
        raise MetricError("stride must be >= 1")
    if output_mode == MIDPOINT:
        values = preds.reshape(-1)
        out_period = period * stride
    elif output_mode == FULL_WINDOW:
        if preds.ndim != 2:
            raise MetricError("full-window predictions must be (windows, window_len)")
        n, length = preds.shape
        if window_len is not None and length != window_len:
            raise MetricError(f"expected windows of length {window_len}, got {length}")
        total = (n - 1) * stride + length
        sums = np.zeros(total)
        counts = np.zeros(total)
        for i in range(n):
            sums[i * stride : i * stride + length] += preds[i]
            counts[i * stride : i * stride + length] += 1
        # samples in a gap (stride > window_len) have no prediction
        values = np.divide(sums, counts, out=np.zeros(total), where=counts > 0)
        out_period = period
    else:
        raise MetricError(f"unknown output_mode {output_mode!r}")
    if stats is not None:
        values = destandardize(values, stats)
    return PowerSeries.uniform(np.maximum(values, 0.0), start_time, out_period)
