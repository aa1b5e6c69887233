"""Command line entry point: ``nilmadv {synth,train,attack,evaluate,run,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack, data, harness, metrics, nn


def _windows_for(net: nn.Network, aggregate_path, appliance_path):
    agg = data.load_channel(aggregate_path)
    app = data.load_channel(appliance_path)
    if len(agg) != len(app):
        raise SystemExit("aggregate and appliance files must cover the same samples")
    stats = {k: data.NormStats(*v) for k, v in net.norm_stats.items()}
    return agg, app, data.make_windows(
        agg, app, net.input_len, 1, net.output_mode,
        stats.get("aggregate"), stats.get("appliance"),
    )


def cmd_synth(args) -> int:
    cfg = data.SynthConfig.from_file(args.config) if args.config else data.SynthConfig()
    if args.days is not None:
        cfg.days = args.days
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agg, channels = data.synthesize_household(
        cfg.profiles, cfg.days, cfg.period, cfg.noise_std, cfg.seed, cfg.base_load, cfg.start_time
    )
    agg.to_csv(out / "aggregate.csv")
    for name, series in channels.items():
        series.to_csv(out / f"{name}.csv")
    (out / "synth.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(f"wrote {len(agg)} samples x {len(channels)} appliances to {out}")
    return 0


def cmd_train(args) -> int:
    agg = data.load_channel(args.aggregate)
    app = data.load_channel(args.appliance)
    mode = nn.MIDPOINT if args.model == "seq2point" else nn.FULL_WINDOW
    ds = data.make_windows(agg, app, args.window, args.stride, mode)
    net = nn.BUILDERS[args.model](
        args.window, filters=args.filters, kernel_sizes=args.kernels, hidden=args.hidden,
        seed=args.seed,
    )
    cfg = nn.TrainConfig(args.epochs, args.lr, args.batch_size, args.seed)
    result = nn.train(net, ds, cfg)
    net.norm_stats = {
        "aggregate": (ds.aggregate_stats.mean, ds.aggregate_stats.std),
        "appliance": (ds.appliance_stats.mean, ds.appliance_stats.std),
    }
    net.save(args.out)
    print(f"final loss {result.losses[-1]:.6g}; checkpoint {args.out}")
    return 0


def cmd_attack(args) -> int:
    net = nn.Network.load(args.checkpoint)
    _, _, ds = _windows_for(net, args.aggregate, args.appliance)
    batch = attack.fgsm(net, ds, args.epsilon, clip_min=args.clip_min)
    batch.save(args.out, seed=args.seed, model_checksum=net.checksum())
    lc, la = attack.loss_delta(net, batch.clean, batch.perturbed, ds.targets)
    print(f"eps={args.epsilon:g}: mean loss {lc.mean():.6g} -> {la.mean():.6g} ({len(lc)} windows)")
    return 0


def cmd_evaluate(args) -> int:
    net = nn.Network.load(args.checkpoint)
    _, app, ds = _windows_for(net, args.aggregate, args.appliance)
    inputs, scenario = ds.inputs, harness.CLEAN
    if args.adversarial:
        batch = attack.AdversarialBatch.load(args.adversarial)
        if len(batch.window_ids) != len(ds) or not np.array_equal(batch.clean, ds.inputs):
            raise SystemExit("adversarial batch does not match these windows")
        inputs, scenario = batch.perturbed, harness.scenario_label(batch.epsilon)
    pred = metrics.reconstruct_series(net.forward(inputs), net.output_mode, 1, ds.appliance_stats)
    offset = (net.input_len - 1) // 2 if net.output_mode == nn.MIDPOINT else 0
    truth = app.values[offset : offset + len(pred)]
    name = args.name or Path(args.appliance).stem
    threshold = args.threshold or harness.ExperimentSpec().threshold(name)
    model = args.model_name or ("seq2point" if net.output_mode == nn.MIDPOINT else "seq2seq")
    report = metrics.evaluate(pred, truth, threshold, name, scenario, model)
    print(",".join(metrics.CSV_HEADER))
    print(",".join(report.row()))
    return 0


def _spec_from_args(args) -> harness.ExperimentSpec:
    if args.spec:
        # the spec file wins over flags
        return harness.ExperimentSpec.from_file(args.spec)
    base = harness.ExperimentSpec.full() if args.preset == "full" else harness.ExperimentSpec()
    d = base.to_dict()
    if args.models:
        d["models"] = args.models
    if args.appliances:
        d["appliances"] = args.appliances
    if args.epsilons is not None:
        d["epsilons"] = args.epsilons
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epochs is not None:
        d["train"]["epochs"] = args.epochs
    if args.days is not None:
        d["data"] = {"synthetic": {"days": args.days}}
    if args.train_days is not None:
        d["train_days"] = args.train_days
    return harness.ExperimentSpec.from_dict(d)


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    try:
        artifact = harness.run_experiment(spec, root=args.out)
    except harness.ExperimentError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(harness.render_report(artifact, "table"), end="")
    print(f"run directory: {artifact.run_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    reports = harness.read_results(run_dir / "reports" / "results.csv")
    epsilons = None
    spec_path = run_dir / "spec.json"
    if spec_path.exists():
        epsilons = json.loads(spec_path.read_text())["epsilons"]
    print(harness.render_report(reports, args.format, epsilons), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nilmadv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic household")
    s.add_argument("--config", help="JSON synthetic-household config")
    s.add_argument("--days", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model on one appliance")
    s.add_argument("--model", choices=sorted(nn.BUILDERS), required=True)
    s.add_argument("--aggregate", required=True)
    s.add_argument("--appliance", required=True)
    s.add_argument("--out", required=True, help="checkpoint path (.npz)")
    s.add_argument("--window", type=int, default=99)
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--filters", type=int, nargs="+", default=[16] * 5)
    s.add_argument("--kernels", type=int, nargs="+", default=list(nn.DEFAULT_KERNELS))
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="FGSM-perturb test windows against a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--aggregate", required=True)
    s.add_argument("--appliance", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--clip-min", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("evaluate", help="MAE/F1/NDE of a checkpoint, optionally under attack")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--aggregate", required=True)
    s.add_argument("--appliance", required=True)
    s.add_argument("--adversarial", help="directory written by 'attack'")
    s.add_argument("--threshold", type=float)
    s.add_argument("--name", help="appliance name (default: file stem)")
    s.add_argument("--model-name", help="label for the model column (default: from checkpoint)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="full train/attack/evaluate grid")
    s.add_argument("--spec", help="JSON experiment spec; overrides the flags below")
    s.add_argument("--preset", choices=["desk", "full"], default="desk")
    s.add_argument("--models", nargs="+", choices=sorted(nn.BUILDERS))
    s.add_argument("--appliances", nargs="+")
    s.add_argument("--epsilons", type=float, nargs="*")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--days", type=float, help="synthetic household length")
    s.add_argument("--train-days", type=float)
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="re-render a finished run")
    s.add_argument("run_dir")
    s.add_argument("--format", choices=["table", "csv", "ratios"], default="table")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
