"""Seq2Point / Seq2Seq load disaggregation under FGSM adversarial attack."""

from .attack import AdversarialBatch, AttackConfig, fgsm, loss_delta
from .data import (
    ApplianceProfile,
    NormStats,
    PowerSeries,
    WindowedDataset,
    destandardize,
    load_channel,
    make_windows,
    resample,
    standardize,
    synthesize_household,
)
from .harness import ExperimentSpec, RunArtifact, export_traces, render_report, run_experiment
from .metrics import MetricsReport, evaluate, f1, mae, nde, reconstruct_series
from .nn import AdamState, Network, TrainConfig, adam_step, build_seq2point, build_seq2seq, train

__version__ = "0.1.0"
