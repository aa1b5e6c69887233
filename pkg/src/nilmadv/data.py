"""Power series ingest, resampling, normalization, windowing and synthetic households."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .nn import FULL_WINDOW, MIDPOINT, OUTPUT_MODES

DEFAULT_PERIOD = 30.0
SECONDS_PER_DAY = 86400.0
# empty bins further than this many periods from the last reading become 0 W
MAX_FILL_PERIODS = 3


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PowerSeries:
    """Power readings in watts.

    ``timestamps`` are unix seconds, strictly increasing. Series produced by
    :func:`resample` or the synthesizer lie on a uniform grid of ``period``.
    """

    timestamps: np.ndarray
    values: np.ndarray
    period: float = DEFAULT_PERIOD

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        if not self.period > 0:
            raise DataError(f"period must be > 0, got {self.period}")
        if ts.shape != vals.shape or vals.ndim != 1:
            raise DataError("timestamps and values must be 1-d and equal length")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise DataError("power values must be finite and non-negative")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise DataError("timestamps must be strictly increasing")

    @classmethod
    def uniform(cls, values, start_time: float = 0.0, period: float = DEFAULT_PERIOD):
        values = np.asarray(values, dtype=np.float64)
        return cls(start_time + period * np.arange(len(values)), values, period)

    @property
    def start_time(self) -> float:
        return float(self.timestamps[0]) if len(self.timestamps) else 0.0

    def __len__(self):
        return len(self.values)

    def slice(self, start: int, stop: int | None = None) -> "PowerSeries":
        return PowerSeries(self.timestamps[start:stop], self.values[start:stop], self.period)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "watts"])
            for t, v in zip(self.timestamps, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


def _parse_rows(lines, fmt: str, path) -> list[tuple[float, float]]:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",") if fmt == "csv" else line.split()
        if fmt == "csv" and lineno == 1 and parts[0].strip().lower() == "timestamp":
            continue
        try:
            if len(parts) != 2:
                raise ValueError
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {line!r}") from None
    return rows


def load_channel(path, fmt: str | None = None, period: float | None = None) -> PowerSeries:
    """Read a UK-DALE style ``<timestamp> <watts>`` file or a two-column CSV.

    Readings are sorted by time; duplicate timestamps keep the last reading.
    ``period`` defaults to the median spacing of the readings.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "ukdale"
    if fmt not in ("csv", "ukdale"):
        raise DataError(f"unknown channel format {fmt!r}")
    with open(path) as fh:
        rows = _parse_rows(fh, fmt, path)
    if not rows:
        raise DataError(f"{path}: no readings")
    latest: dict[float, float] = {}
    for t, v in rows:
        latest[t] = v
    ts = np.array(sorted(latest))
    vals = np.array([latest[t] for t in ts])
    if period is None:
        period = float(np.median(np.diff(ts))) if len(ts) > 1 else DEFAULT_PERIOD
    return PowerSeries(ts, vals, period)


def resample(series: PowerSeries, period: float = DEFAULT_PERIOD) -> PowerSeries:
    """Mean-downsample / forward-fill-upsample onto a uniform grid starting at the first reading."""
    if not period > 0:
        raise DataError(f"period must be > 0, got {period}")
    if len(series) == 0:
        raise DataError("cannot resample an empty series")
    t0 = series.timestamps[0]
    bins = np.floor((series.timestamps - t0) / period + 1e-9).astype(np.int64)
    n = int(bins[-1]) + 1
    sums = np.bincount(bins, weights=series.values, minlength=n)
    counts = np.bincount(bins, minlength=n)
    grid = t0 + period * np.arange(n)
    out = np.zeros(n)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]

    # forward fill short gaps from the last reading before each empty bin
    last_idx = np.searchsorted(series.timestamps, grid, side="right") - 1
    empty = np.flatnonzero(~filled)
    gap = grid[empty] - series.timestamps[last_idx[empty]]
    short = gap <= MAX_FILL_PERIODS * period
    out[empty[short]] = series.values[last_idx[empty[short]]]
    return PowerSeries(grid, out, period)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.std) and self.std > 0):
            raise DataError(f"std must be > 0, got {self.std}")

    @classmethod
    def fit(cls, values) -> "NormStats":
        values = np.asarray(getattr(values, "values", values), dtype=np.float64)
        std = float(np.std(values))
        if std == 0:
            raise DataError("cannot standardize a constant series (std = 0)")
        return cls(float(np.mean(values)), std)


def standardize(values, stats: NormStats | None = None) -> tuple[np.ndarray, NormStats]:
    """z-score ``values``; statistics are fitted on them unless ``stats`` is given."""
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if stats is None:
        stats = NormStats.fit(values)
    return (values - stats.mean) / stats.std, stats


def destandardize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # (n, L), normalized aggregate
    targets: np.ndarray  # (n,) midpoint or (n, L) full window, normalized appliance
    starts: np.ndarray  # first sample index of each window
    window_len: int
    stride: int
    output_mode: str
    aggregate_stats: NormStats
    appliance_stats: NormStats
    start_time: float = 0.0
    period: float = DEFAULT_PERIOD

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise DataError("inputs and targets must be equal in count")
        if self.inputs.ndim != 2 or self.inputs.shape[1] != self.window_len:
            raise DataError(f"every input must have length {self.window_len}")

    def __len__(self):
        return len(self.inputs)


def make_windows(
    aggregate: PowerSeries,
    appliance: PowerSeries,
    window_len: int,
    stride: int = 1,
    output_mode: str = MIDPOINT,
    aggregate_stats: NormStats | None = None,
    appliance_stats: NormStats | None = None,
) -> WindowedDataset:
    """Slide a window over the aggregate and pair each with its appliance target.

    Statistics default to the series passed in, i.e. the training split; pass
    the training statistics explicitly when windowing test data.
    """
    if output_mode not in OUTPUT_MODES:
        raise DataError(f"output_mode must be one of {OUTPUT_MODES}")
    if len(aggregate) != len(appliance):
        raise DataError(
            f"aggregate ({len(aggregate)}) and appliance ({len(appliance)}) must share a grid"
        )
    if window_len < 1 or stride < 1:
        raise DataError("window_len and stride must be >= 1")
    if len(aggregate) < window_len:
        raise DataError(f"series of length {len(aggregate)} shorter than window {window_len}")
    if output_mode == MIDPOINT and window_len % 2 == 0:
        raise DataError("midpoint targets need an odd window_len")

    x, agg_stats = standardize(aggregate.values, aggregate_stats)
    y, app_stats = standardize(appliance.values, appliance_stats)
    count = (len(x) - window_len) // stride + 1
    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(window_len)
    inputs = x[idx]
    if output_mode == MIDPOINT:
        targets = y[starts + (window_len - 1) // 2]
    else:
        targets = y[idx]
    return WindowedDataset(
        inputs, targets, starts, window_len, stride, output_mode, agg_stats, app_stats,
        start_time=aggregate.start_time, period=aggregate.period,
    )


@dataclass
class ApplianceProfile:
    """Event model for one synthetic appliance.

    Poisson appliances fire ``events_per_day`` activations whose duration is
    uniform in ``duration_min`` (minutes) at ``on_power`` +/- ``power_jitter``.
    ``phases`` replaces the single level by a sequence of (watts, minutes).
    ``duty_cycle`` = (on minutes, off minutes) makes the appliance periodic.
    """

    name: str
    on_power: float
    state_threshold: float
    power_jitter: float = 0.0
    events_per_day: float = 0.0
    duration_min: tuple[float, float] = (1.0, 1.0)
    phases: list[tuple[float, float]] | None = None
    duty_cycle: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.on_power > 0:
            raise DataError(f"{self.name}: on_power must be > 0")
        if not self.state_threshold > 0:
            raise DataError(f"{self.name}: state_threshold must be > 0")
        if self.duty_cycle is None:
            lo, hi = self.duration_min
            if self.events_per_day <= 0 or lo <= 0 or hi < lo:
                raise DataError(f"{self.name}: rates and durations must be positive")
        elif min(self.duty_cycle) <= 0:
            raise DataError(f"{self.name}: duty cycle durations must be positive")
        if self.phases is not None and any(w <= 0 or m <= 0 for w, m in self.phases):
            raise DataError(f"{self.name}: phase powers and durations must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ApplianceProfile":
        d = dict(d)
        for key in ("duration_min", "duty_cycle"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("phases") is not None:
            d["phases"] = [tuple(p) for p in d["phases"]]
        return cls(**d)


DEFAULT_PROFILES = {
    "kettle": ApplianceProfile(
        "kettle", 2400.0, 500.0, power_jitter=50.0, events_per_day=8, duration_min=(1.0, 3.0)
    ),
    "microwave": ApplianceProfile(
        "microwave", 1200.0, 500.0, power_jitter=50.0, events_per_day=6, duration_min=(1.0, 5.0)
    ),
    "fridge": ApplianceProfile(
        "fridge", 100.0, 10.0, power_jitter=5.0, duty_cycle=(15.0, 30.0)
    ),
    "washing_machine": ApplianceProfile(
        "washing_machine", 2000.0, 500.0, power_jitter=50.0, events_per_day=1,
        phases=[(2000.0, 10.0), (300.0, 40.0), (600.0, 10.0)],
    ),
}


def sample_events(profile: ApplianceProfile, days: float, rng: np.random.Generator):
    """Return ``(start_seconds, [(watts, seconds), ...])`` for each activation."""
    span = days * SECONDS_PER_DAY
    events = []
    if profile.duty_cycle is not None:
        on, off = (m * 60.0 for m in profile.duty_cycle)
        t = -rng.uniform(0.0, on + off)
        while t < span:
            watts = profile.on_power + rng.normal(0.0, profile.power_jitter)
            events.append((t, [(watts, on)]))
            t += on + off
        return events
    count = rng.poisson(profile.events_per_day * days)
    starts = np.sort(rng.uniform(0.0, span, size=count))
    for start in starts:
        if profile.phases is not None:
            shape = [(w + rng.normal(0.0, profile.power_jitter), m * 60.0) for w, m in profile.phases]
        else:
            lo, hi = profile.duration_min
            shape = [
                (profile.on_power + rng.normal(0.0, profile.power_jitter), rng.uniform(lo, hi) * 60.0)
            ]
        events.append((float(start), shape))
    return events


def render_events(events, n_samples: int, period: float) -> np.ndarray:
    """Rasterize events onto a grid; overlapping activations keep the larger power."""
    out = np.zeros(n_samples)
    for start, shape in events:
        t = start
        for watts, dur in shape:
            i0 = max(int(np.ceil(t / period)), 0)
            i1 = min(int(np.ceil((t + dur) / period)), n_samples)
            if i1 > i0:
                np.maximum(out[i0:i1], max(watts, 0.0), out=out[i0:i1])
            t += dur
    return out


@dataclass
class SynthConfig:
    profiles: list[ApplianceProfile] = field(
        default_factory=lambda: list(DEFAULT_PROFILES.values())
    )
    days: float = 17.0
    period: float = DEFAULT_PERIOD
    noise_std: float = 10.0
    base_load: float = 150.0
    seed: int = 0
    start_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        if "profiles" in d:
            d["profiles"] = [
                DEFAULT_PROFILES[p] if isinstance(p, str) else ApplianceProfile.from_dict(p)
                for p in d["profiles"]
            ]
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def synthesize_household(
    profiles: Sequence[ApplianceProfile],
    days: float,
    period: float = DEFAULT_PERIOD,
    noise_std: float = 10.0,
    seed: int = 0,
    base_load: float = 150.0,
    start_time: float = 0.0,
) -> tuple[PowerSeries, dict[str, PowerSeries]]:
    """Aggregate = sum of appliance channels + base load + Gaussian noise, clamped at 0."""
    n = int(round(days * SECONDS_PER_DAY / period))
    # one child stream per appliance so adding a profile doesn't reshuffle the others
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(len(profiles) + 1)
    channels = {}
    for profile, child in zip(profiles, children[1:]):
        rng = np.random.default_rng(child)
        events = sample_events(profile, days, rng)
        channels[profile.name] = PowerSeries.uniform(
            render_events(events, n, period), start_time, period
        )
    noise = np.random.default_rng(children[0]).normal(0.0, noise_std, size=n) if noise_std > 0 else np.zeros(n)
    total = np.zeros(n)
    for ch in channels.values():
        total = total + ch.values
    aggregate = np.maximum(total + (base_load + noise), 0.0)
    return PowerSeries.uniform(aggregate, start_time, period), channels


def split_days(series: PowerSeries, train_days: float) -> tuple[PowerSeries, PowerSeries]:
    cut = int(round(train_days * SECONDS_PER_DAY / series.period))
    if not 0 < cut < len(series):
        raise DataError(f"cannot split {len(series)} samples after {train_days} days")
    return series.slice(0, cut), series.slice(cut)
