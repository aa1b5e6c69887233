"""Train -> clean evaluation -> FGSM sweep -> attacked evaluation, and its reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack, data, metrics, nn

logger = logging.getLogger(__name__)

MODEL_LABELS = {"seq2point": "Seq2Point", "seq2seq": "Seq2Seq"}
DEFAULT_EPSILONS = (0.01, 0.10, 0.25)
DEFAULT_THRESHOLDS = {"fridge": 10.0}
FALLBACK_THRESHOLD = 500.0
CLEAN = "clean"


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def scenario_label(eps: float | None) -> str:
    return CLEAN if eps is None else f"fgsm@{eps:g}"


def scenario_epsilon(label: str) -> float | None:
    if label == CLEAN:
        return None
    if not label.startswith("fgsm@"):
        raise ValueError(f"unknown scenario label {label!r}")
    return float(label[5:])


@dataclass
class ArchConfig:
    window_len: int = 99
    filters: tuple[int, ...] = (16, 16, 16, 16, 16)
    kernel_sizes: tuple[int, ...] = nn.DEFAULT_KERNELS
    hidden: int = 128

    @classmethod
    def full(cls) -> "ArchConfig":
        return cls(nn.DEFAULT_WINDOW, nn.DEFAULT_FILTERS, nn.DEFAULT_KERNELS, nn.DEFAULT_HIDDEN)


@dataclass
class ExperimentSpec:
    """Everything a run needs. The defaults are the desk-scale preset."""

    models: list[str] = field(default_factory=lambda: ["seq2point", "seq2seq"])
    appliances: list[str] = field(default_factory=lambda: list(data.DEFAULT_PROFILES))
    epsilons: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    # {"synthetic": {...SynthConfig...}} or {"aggregate": path, "appliances": {name: path}}
    data: dict = field(default_factory=lambda: {"synthetic": {"days": 17}})
    train_days: float = 14.0
    thresholds: dict[str, float] = field(default_factory=dict)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: nn.TrainConfig = field(
        default_factory=lambda: nn.TrainConfig(epochs=10, learning_rate=1e-3, batch_size=64)
    )
    train_stride: int = 4
    test_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in self.arch.items()})
        if isinstance(self.train, dict):
            self.train = nn.TrainConfig(**self.train)
        self.epsilons = [float(e) for e in self.epsilons]
        if not self.models or not self.appliances:
            raise ValueError("models and appliances must be non-empty")
        unknown = set(self.models) - set(nn.BUILDERS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}; choose from {sorted(nn.BUILDERS)}")
        if any(e < 0 for e in self.epsilons):
            raise ValueError("epsilons must be >= 0")
        if any(b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly increasing")
        if self.train_stride < 1 or self.test_stride < 1:
            raise ValueError("strides must be >= 1")
        if "synthetic" not in self.data and "aggregate" not in self.data:
            raise ValueError("data must give either 'synthetic' or 'aggregate' + 'appliances'")

    @classmethod
    def full(cls, **overrides) -> "ExperimentSpec":
        """Full-scale training regime (150 epochs, lr 1e-4, full architecture)."""
        kw = dict(arch=ArchConfig.full(), train=nn.TrainConfig(), train_stride=1)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["arch"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def threshold(self, appliance: str) -> float:
        if appliance in self.thresholds:
            return float(self.thresholds[appliance])
        if appliance in data.DEFAULT_PROFILES:
            return data.DEFAULT_PROFILES[appliance].state_threshold
        return DEFAULT_THRESHOLDS.get(appliance, FALLBACK_THRESHOLD)

    def cell_seed(self, model: str, appliance: str) -> int:
        ss = np.random.SeedSequence([self.seed, zlib.crc32(model.encode()), zlib.crc32(appliance.encode())])
        return int(ss.generate_state(1)[0])


@dataclass
class Cell:
    """One trained (model, appliance) pair and everything measured on it."""

    model: str
    appliance: str
    threshold: float
    window_len: int
    offset: int  # test-split index of the first reconstructed sample
    truth: np.ndarray  # watts over the reconstructed segment
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    reports: list[metrics.MetricsReport] = field(default_factory=list)
    loss_deltas: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    checkpoint: Path | None = None
    n_windows: int = 0


@dataclass
class RunArtifact:
    spec: ExperimentSpec
    run_dir: Path | None
    cells: list[Cell] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def reports(self) -> list[metrics.MetricsReport]:
        return [r for c in self.cells for r in c.reports]

    @property
    def checkpoints(self) -> dict[tuple[str, str], Path | None]:
        return {(c.model, c.appliance): c.checkpoint for c in self.cells}

    def cell(self, model: str, appliance: str) -> Cell:
        for c in self.cells:
            if c.model == model and c.appliance == appliance:
                return c
        raise KeyError(f"no cell for {model}/{appliance}")


def _load_data(spec: ExperimentSpec):
    src = spec.data
    if "synthetic" in src:
        cfg = dict(src["synthetic"])
        cfg["seed"] = spec.seed
        synth = data.SynthConfig.from_dict(cfg)
        names = {p.name for p in synth.profiles}
        missing = set(spec.appliances) - names
        if missing:
            raise ValueError(f"no synthetic profile for {sorted(missing)}")
        return data.synthesize_household(
            synth.profiles, synth.days, synth.period, synth.noise_std, synth.seed,
            synth.base_load, synth.start_time,
        )
    period = float(src.get("period", data.DEFAULT_PERIOD))
    aggregate = data.resample(data.load_channel(src["aggregate"]), period)
    channels = {}
    for name in spec.appliances:
        ch = data.resample(data.load_channel(src["appliances"][name]), period)
        channels[name] = _align(ch, aggregate)
    return aggregate, channels


def _align(series: data.PowerSeries, ref: data.PowerSeries) -> data.PowerSeries:
    # place a resampled channel on the reference grid; missing samples are 0 W
    idx = np.round((series.timestamps - ref.start_time) / ref.period).astype(np.int64)
    ok = (idx >= 0) & (idx < len(ref))
    values = np.zeros(len(ref))
    values[idx[ok]] = series.values[ok]
    return data.PowerSeries(ref.timestamps, values, ref.period)


def _new_run_dir(root: Path, seed: int) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = root / f"{stamp}-{seed}"
    n = 1
    while run_dir.exists():
        run_dir = root / f"{stamp}-{seed}.{n}"
        n += 1
    for sub in ("models", "reports", "traces"):
        (run_dir / sub).mkdir(parents=True)
    return run_dir


def _predict_series(net, inputs, mode, stride, stats):
    preds = net.forward(inputs)
    return metrics.reconstruct_series(preds, mode, stride, stats, window_len=net.input_len).values


def _run_cell(spec, model, appliance, agg_train, agg_test, app_train, app_test, run_dir, timings):
    mode = nn.MIDPOINT if model == "seq2point" else nn.FULL_WINDOW
    arch = spec.arch
    seed = spec.cell_seed(model, appliance)
    key = f"{model}/{appliance}"
    stage = "window"
    try:
        train_ds = data.make_windows(agg_train, app_train, arch.window_len, spec.train_stride, mode)
        test_stride = 1 if mode == nn.MIDPOINT else spec.test_stride
        test_ds = data.make_windows(
            agg_test, app_test, arch.window_len, test_stride, mode,
            train_ds.aggregate_stats, train_ds.appliance_stats,
        )

        stage = "train"
        t0 = time.perf_counter()
        net = nn.BUILDERS[model](
            arch.window_len, filters=arch.filters, kernel_sizes=arch.kernel_sizes,
            hidden=arch.hidden, seed=seed,
        )
        cfg = nn.TrainConfig(spec.train.epochs, spec.train.learning_rate, spec.train.batch_size, seed)
        nn.train(net, train_ds, cfg)
        net.norm_stats = {
            "aggregate": (train_ds.aggregate_stats.mean, train_ds.aggregate_stats.std),
            "appliance": (train_ds.appliance_stats.mean, train_ds.appliance_stats.std),
        }
        timings[f"{key}/train"] = time.perf_counter() - t0
        checkpoint = None
        if run_dir is not None:
            checkpoint = run_dir / "models" / f"{model}_{appliance}.npz"
            net.save(checkpoint)

        # clean scenario first; it is never recomputed once attacks start
        stage = "evaluate-clean"
        t0 = time.perf_counter()
        offset = (arch.window_len - 1) // 2 if mode == nn.MIDPOINT else 0
        clean = _predict_series(net, test_ds.inputs, mode, test_stride, test_ds.appliance_stats)
        truth = app_test.values[offset : offset + len(clean)]
        threshold = spec.threshold(appliance)
        cell = Cell(model, appliance, threshold, arch.window_len, offset, truth,
                    checkpoint=checkpoint, n_windows=len(test_ds))
        cell.predictions[CLEAN] = clean
        cell.reports.append(metrics.evaluate(clean, truth, threshold, appliance, CLEAN, model))
        timings[f"{key}/clean"] = time.perf_counter() - t0

        for eps in spec.epsilons:
            label = scenario_label(eps)
            stage = f"attack@{eps:g}"
            t0 = time.perf_counter()
            batch = attack.fgsm(net, test_ds, eps)
            stage = f"evaluate@{eps:g}"
            adv = _predict_series(net, batch.perturbed, mode, test_stride, test_ds.appliance_stats)
            cell.predictions[label] = adv
            cell.reports.append(metrics.evaluate(adv, truth, threshold, appliance, label, model))
            cell.loss_deltas[eps] = attack.loss_delta(net, batch.clean, batch.perturbed, test_ds.targets)
            timings[f"{key}/{label}"] = time.perf_counter() - t0
        return cell
    except Exception as exc:
        raise ExperimentError(f"{stage} ({key})", exc) from exc


def run_experiment(spec: ExperimentSpec, root="runs", write: bool = True) -> RunArtifact:
    """Execute the full grid. With ``write`` the run lands in ``root/<timestamp>-<seed>/``."""
    run_dir = _new_run_dir(Path(root), spec.seed) if write else None
    artifact = RunArtifact(spec, run_dir)
    if run_dir is not None:
        (run_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")

    t_start = time.perf_counter()
    try:
        try:
            aggregate, channels = _load_data(spec)
            agg_train, agg_test = data.split_days(aggregate, spec.train_days)
        except Exception as exc:
            raise ExperimentError("data", exc) from exc
        for model in spec.models:
            for appliance in spec.appliances:
                app_train, app_test = data.split_days(channels[appliance], spec.train_days)
                cell = _run_cell(spec, model, appliance, agg_train, agg_test,
                                 app_train, app_test, run_dir, artifact.timings)
                artifact.cells.append(cell)
                logger.info("finished %s/%s", model, appliance)
    finally:
        artifact.timings["total"] = time.perf_counter() - t_start
        if run_dir is not None:
            write_reports(artifact)
    if run_dir is not None:
        for cell in artifact.cells:
            wid = first_activation_window(cell)
            if wid is not None:
                export_traces(artifact, [wid], cell.model, cell.appliance)
    return artifact


def write_reports(artifact: RunArtifact) -> None:
    reports_dir = artifact.run_dir / "reports"
    epsilons = artifact.spec.epsilons
    (reports_dir / "results.csv").write_text(render_report(artifact.reports, "csv"))
    (reports_dir / "table.txt").write_text(render_report(artifact.reports, "table", epsilons))
    (reports_dir / "degradation.csv").write_text(render_report(artifact.reports, "ratios"))
    with open(reports_dir / "loss_deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "appliance", "scenario", "mean_clean_loss", "mean_attacked_loss",
                    "fraction_increased"])
        for cell in artifact.cells:
            for eps, (lc, la) in cell.loss_deltas.items():
                w.writerow([cell.model, cell.appliance, scenario_label(eps), f"{lc.mean():.10g}",
                            f"{la.mean():.10g}", f"{np.mean(la > lc):.10g}"])
    with open(reports_dir / "timings.json", "w") as fh:
        json.dump(artifact.timings, fh, indent=2)


def read_results(path) -> list[metrics.MetricsReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            metrics.MetricsReport(
                appliance=row["appliance"], scenario=row["scenario"], mae=float(row["mae"]),
                f1=float(row["f1"]), nde=float(row["nde"]), model=row["model"],
            )
            for row in reader
        ]


def _ratio(attacked: float, clean: float) -> float:
    if clean == 0:
        return 1.0 if attacked == 0 else math.inf
    return attacked / clean


def degradation_ratios(reports: Sequence[metrics.MetricsReport]) -> list[dict]:
    """Attacked / clean for every metric of every attacked cell."""
    clean = {(r.model, r.appliance): r for r in reports if r.scenario == CLEAN}
    rows = []
    for r in reports:
        base = clean.get((r.model, r.appliance))
        if r.scenario == CLEAN or base is None:
            continue
        rows.append({
            "model": r.model, "appliance": r.appliance, "scenario": r.scenario,
            "mae_ratio": _ratio(r.mae, base.mae),
            "f1_ratio": _ratio(r.f1, base.f1),
            "nde_ratio": _ratio(r.nde, base.nde),
        })
    return rows


def _table(reports, epsilons=None) -> str:
    if epsilons is None:
        epsilons = sorted({e for r in reports if (e := scenario_epsilon(r.scenario)) is not None})
    scenarios = [CLEAN] + [scenario_label(e) for e in epsilons]
    titles = ["Without Attack"] + [f"FGSM (eps={e:.2f})" for e in epsilons]
    cells = {(r.model, r.appliance, r.scenario): r for r in reports}
    name_w = max([len("Appliance")] + [len(r.appliance) for r in reports])
    group_w = 26
    lines = [
        " " * name_w + " | " + " | ".join(t.center(group_w) for t in titles),
        "Appliance".ljust(name_w) + " | "
        + " | ".join(f"{'MAE':>8}{'F1-score':>9}{'NDE':>9}" for _ in titles),
    ]
    rule = "=" * len(lines[0])
    lines.insert(0, rule)
    lines.append(rule)
    models = list(dict.fromkeys(r.model for r in reports))
    for model in models:
        lines.append(MODEL_LABELS.get(model, model).center(len(rule)))
        lines.append("-" * len(rule))
        for appliance in dict.fromkeys(r.appliance for r in reports if r.model == model):
            groups = []
            for sc in scenarios:
                r = cells.get((model, appliance, sc))
                groups.append(
                    f"{r.mae:8.2f}{r.f1:9.2f}{r.nde:9.2f}" if r else f"{'-':>8}{'-':>9}{'-':>9}"
                )
            lines.append(appliance.ljust(name_w) + " | " + " | ".join(groups))
        lines.append(rule)
    return "\n".join(lines) + "\n"


def render_report(reports, fmt: str = "csv", epsilons=None) -> str:
    """Render metric cells as ``csv``, an aligned text ``table``, or degradation ``ratios``."""
    if isinstance(reports, RunArtifact):
        epsilons = reports.spec.epsilons if epsilons is None else epsilons
        reports = reports.reports
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if fmt == "csv":
        w.writerow(metrics.CSV_HEADER)
        for r in reports:
            w.writerow(r.row())
        return buf.getvalue()
    if fmt == "ratios":
        w.writerow(["model", "appliance", "scenario", "mae_ratio", "f1_ratio", "nde_ratio"])
        for row in degradation_ratios(reports):
            w.writerow([row["model"], row["appliance"], row["scenario"]]
                       + [f"{row[k]:.10g}" for k in ("mae_ratio", "f1_ratio", "nde_ratio")])
        return buf.getvalue()
    if fmt == "table":
        return _table(reports, epsilons)
    raise ValueError(f"unknown report format {fmt!r}")


def first_activation_window(cell: Cell) -> int | None:
    """Window id whose span is centred on the first ON sample of the test truth."""
    on = np.flatnonzero(cell.truth >= cell.threshold)
    if on.size == 0:
        return None
    centre = cell.offset + int(on[0])
    wid = centre - (cell.window_len - 1) // 2
    return int(min(max(wid, 0), cell.n_windows - 1))


def export_traces(artifact: RunArtifact, window_ids, model: str, appliance: str,
                  out_dir=None) -> list[Path]:
    """Write one CSV per test window: truth, clean and attacked predictions in watts."""
    cell = artifact.cell(model, appliance)
    if out_dir is None:
        if artifact.run_dir is None:
            raise ValueError("artifact has no run directory; pass out_dir")
        out_dir = artifact.run_dir / "traces"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attacked = [s for s in cell.predictions if s != CLEAN]
    paths = []
    for wid in window_ids:
        if not 0 <= wid < cell.n_windows:
            raise KeyError(f"unknown window id {wid} for {model}/{appliance}")
        t0 = max(wid - cell.offset, 0)
        t1 = min(wid + cell.window_len - cell.offset, len(cell.truth))
        path = out_dir / f"{model}_{appliance}_w{wid}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "truth_watts", "clean_pred_watts"]
                       + [f"adv_pred_watts@{scenario_epsilon(s):g}" for s in attacked])
            for i in range(t0, t1):
                w.writerow([cell.offset + i, f"{cell.truth[i]:.10g}",
                            f"{cell.predictions[CLEAN][i]:.10g}"]
                           + [f"{cell.predictions[s][i]:.10g}" for s in attacked])
        paths.append(path)
    return paths
