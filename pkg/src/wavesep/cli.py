"""Command-line surface: train, separate, evaluate, sweep, gradcheck, synth-data.

`train`, `evaluate`, and `sweep` read a flat JSON config file whose keys
mirror TrainConfig; every key can be overridden with a matching
``--key value`` flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import models as models_mod
from . import training
from .errors import WavesepError


def _config_flag_type(field):
    if field.name == "hidden":
        return lambda s: tuple(int(v) for v in s.split(",") if v)
    if field.name == "n_freq":
        return lambda s: None if s.lower() in ("none", "") else int(s)
    if field.type == "bool" or isinstance(field.default, bool):
        return lambda s: s.lower() in ("1", "true", "yes")
    if isinstance(field.default, int):
        return int
    if isinstance(field.default, float):
        return float
    return str


def _add_config_flags(parser):
    for f in dataclasses.fields(training.TrainConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            type=_config_flag_type(f), default=None,
                            help=f"override config key {f.name}")


def _collect_config(args) -> training.TrainConfig:
    overrides = {}
    for f in dataclasses.fields(training.TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return training.load_config(args.config, overrides)


def _cmd_train(args) -> int:
    config = _collect_config(args)
    model, report = training.train(config)
    agg = report.test_report.aggregates
    print(f"trained {config.variant} for {report.steps} steps "
          f"(loss {report.loss_trace[-1]:.6f}, wall {report.wall_clock_s:.1f}s)")
    for metric in ("sdr_db", "sir_db", "sar_db", "stoi"):
        s = agg[metric]
        print(f"  {metric}: median {s['median']:.3f}  p25 {s['p25']:.3f}  p75 {s['p75']:.3f}")
    if config.checkpoint_path:
        print(f"checkpoint: {config.checkpoint_path}")
    if config.report_path:
        print(f"report: {config.report_path}")
    return 0


def _cmd_separate(args) -> int:
    model = models_mod.load_checkpoint(args.ckpt)
    out = training.separate_file(model, args.input, args.output,
                                 unit_mask=args.unit_mask, dump_grids=args.dump_grids)
    print(f"wrote {args.output} ({len(out)} samples at {out.sample_rate} Hz)")
    return 0


def _cmd_evaluate(args) -> int:
    examples = training.examples_from_manifest(args.manifest)
    estimator = "mixture" if args.baseline == "mixture" else models_mod.load_checkpoint(args.ckpt)
    rows = training.evaluate_examples(estimator, examples, workers=args.workers)
    report = metrics_mod.aggregate(rows)
    if args.out_csv:
        metrics_mod.report_to_csv(report, args.out_csv)
    if args.out_json:
        metrics_mod.report_to_json(report, args.out_json)
    for metric, stats in report.aggregates.items():
        print(f"{metric}: median {stats['median']:.3f}  "
              f"p25 {stats['p25']:.3f}  p75 {stats['p75']:.3f}")
    return 0


def _cmd_sweep(args) -> int:
    config = _collect_config(args)
    values = args.values.split(",") if args.values else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = training.sweep(config, args.axis, values=values, seeds=seeds)
    training.sweep_rows_to_csv(rows, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_synth_data(args) -> int:
    corpus = data_mod.synth_toy_corpus(
        args.out, n_speakers_per_class=args.speakers_per_class,
        minutes=args.minutes, seed=args.seed, sample_rate=args.sample_rate,
    )
    n_files = sum(len(v) for v in corpus.speakers.values())
    print(f"wrote {n_files} utterances for {len(corpus.speakers)} speakers under {args.out}")
    return 0


def _gradcheck_cases():
    """Canned gradient-check suite over the primitive ops and losses."""
    rng = np.random.default_rng(7)

    def tensor(shape, scale=1.0):
        return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    sig = tensor(40)
    taps = tensor((3, 8), scale=0.5)
    grid = tensor((5, 3))
    a = tensor((4, 6))
    b = tensor((4, 6))
    w = tensor((6, 5), scale=0.4)
    bias = tensor(5, scale=0.1)

    cases = [
        ("conv1d", lambda: ad.reduce_sum(ad.square(ad.conv1d(sig, taps, 4))), [sig, taps]),
        ("transposed_conv1d",
         lambda: ad.reduce_sum(ad.square(ad.transposed_conv1d(grid, taps, 4))), [grid, taps]),
        ("dense", lambda: ad.reduce_sum(ad.square(ad.dense(a, w, bias))), [a, w, bias]),
        ("softplus", lambda: ad.reduce_sum(ad.softplus(a)), [a]),
        ("sigmoid", lambda: ad.reduce_sum(ad.sigmoid(a)), [a]),
        ("abs", lambda: ad.reduce_sum(ad.absolute(a)), [a]),
        ("mul_div", lambda: ad.reduce_sum(ad.div_guarded(ad.mul(a, b), ad.square(b))), [a, b]),
        ("dot", lambda: ad.square(ad.dot(a, b)), [a, b]),
    ]

    n = 2600  # at least 30 frames in the intelligibility pipeline at 8 kHz
    x = ad.Tensor(rng.standard_normal(n) * 0.1, requires_grad=True)
    y = x.data + 0.05 * rng.standard_normal(n)
    z = rng.standard_normal(n) * 0.1
    cases += [
        ("mse_loss", lambda: losses_mod.mse_loss(x, y), [x]),
        ("sdr_loss", lambda: losses_mod.sdr_loss(x, y), [x]),
        ("sir_loss", lambda: losses_mod.sir_loss(x, y, z), [x]),
        ("sar_loss", lambda: losses_mod.sar_loss(x, y, z), [x]),
        ("stoi", lambda: losses_mod.stoi_value(x, y, sample_rate=8000), [x]),
    ]
    return cases


def run_gradcheck_suite(delta=1e-6, tol=1e-4, sample=24, printer=print) -> bool:
    ok = True
    for name, f, params in _gradcheck_cases():
        report = ad.grad_check(f, params, delta=delta, tol=tol, sample=sample)
        status = "ok" if report.ok else "FAIL"
        printer(f"{name:20s} max_rel={report.max_rel_err:.3e}  {status}")
        ok &= report.ok
    return ok


def _cmd_gradcheck(args) -> int:
    ok = run_gradcheck_suite(delta=args.delta, tol=args.tol, sample=args.sample)
    print("gradient checks passed" if ok else "gradient checks FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavesep",
                                     description="End-to-end single-channel source separation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a separation model")
    p.add_argument("--config", type=Path, default=None, help="flat JSON config file")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("separate", help="separate a mixture WAV with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--unit-mask", action="store_true",
                   help="diagnostic: bypass the network with an all-ones grid")
    p.add_argument("--dump-grids", default=None,
                   help="directory for CSV/raw dumps of internals and filters")
    p.set_defaults(func=_cmd_separate)

    p = sub.add_parser("evaluate", help="score a checkpoint over a test manifest")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--baseline", choices=["mixture"], default=None,
                   help="score the raw mixture instead of a checkpoint")
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="run an experiment sweep")
    p.add_argument("--axis", required=True, choices=sorted(training.SWEEP_AXES))
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--out", required=True, help="consolidated CSV path")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks of ops and losses")
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sample", type=int, default=24)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth-data", help="generate the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--minutes", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers-per-class", type=int, default=3)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=_cmd_synth_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and args.baseline is None and args.ckpt is None:
        parser.error("evaluate needs --ckpt unless --baseline is given")
    try:
        return args.func(args)
    except WavesepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
