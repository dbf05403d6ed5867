"""Training loop, optimizers, experiment reports, and sweeps.

Everything here is deterministic under (config, seed): corpus synthesis,
dataset iteration, initialization, and the update rule all derive from
the single config seed, so two runs with the same config produce
bitwise-identical checkpoints and reports.  Wall-clock time is printed
but kept out of the serialized report for exactly that reason.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import models as models_mod
from .dsp import Waveform
from .errors import ConfigError, TrainingDivergedError
from .metrics import SeparationReport

SWEEP_AXES = {
    "datasize": [1.0, 2.0, 5.0, 10.0],
    "stride": [2, 4, 8, 16, 32, 64, 128, 256],
    "arch": list(models_mod.VARIANTS),
    "loss": ["mse", "sdr", "0.75*sdr+0.25*stoi", "0.5*sir+0.5*sar"],
}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "full_aet_mask"
    window_len: int = 1024
    stride: int = 16
    smoothing_len: int = 5
    hidden: tuple[int, ...] = (512, 512, 512)
    n_freq: int | None = None
    fourier_init: bool = False
    sample_rate: int = 16000
    loss: str = "sdr"
    minutes: float = 10.0
    dur_s: float = 2.0
    batch_size: int = 8
    max_steps: int = 1000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    grad_clip: float = 5.0
    seed: int = 0
    corpus: str = "toy"
    toy_speakers: int = 3
    toy_minutes: float = 6.0
    test_minutes: float = 1.0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    checkpoint_path: str | None = None
    report_path: str | None = None
    workdir: str | None = None
    eval_workers: int = 1

    def __post_init__(self):
        for name in ("window_len", "stride", "smoothing_len", "batch_size",
                     "max_steps", "sample_rate", "toy_speakers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("minutes", "dur_s", "learning_rate", "grad_clip",
                     "toy_minutes", "test_minutes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        losses_mod.parse_loss(self.loss)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def architecture(self) -> models_mod.ArchitectureSpec:
        return models_mod.ArchitectureSpec(
            variant=self.variant,
            window_len=self.window_len,
            stride=self.stride,
            smoothing_len=self.smoothing_len,
            hidden=self.hidden,
            n_freq=self.n_freq,
            sample_rate=self.sample_rate,
            seed=self.seed,
            fourier_init=self.fourier_init,
        )


def config_from_dict(payload: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "hidden" in payload and isinstance(payload["hidden"], str):
        payload = dict(payload)
        payload["hidden"] = tuple(int(v) for v in payload["hidden"].split(",") if v)
    return TrainConfig(**payload)


def load_config(path, overrides=None) -> TrainConfig:
    """Read a flat JSON config file, then apply CLI-style overrides."""
    payload = {}
    if path is not None:
        with open(path) as fh:
            payload = json.load(fh)
    if overrides:
        payload.update(overrides)
    return config_from_dict(payload)


class Adam:
    """Adaptive-moment gradient descent (decay 0.9/0.999, eps 1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


def clip_gradients(params, max_norm):
    """Scale all gradients down to a shared global norm bound."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.node.grad = p.grad * scale
    return norm


@dataclass
class ExperimentReport:
    config: dict
    loss_trace: list[float]
    test_report: SeparationReport | None
    steps: int
    wall_clock_s: float = 0.0

    def to_json(self, include_timing=False) -> str:
        payload = {
            "config": self.config,
            "steps": self.steps,
            "loss_trace": self.loss_trace,
            "test_report": None,
        }
        if self.test_report is not None:
            payload["test_report"] = {
                "rows": [dataclasses.asdict(r) for r in self.test_report.rows],
                "aggregates": self.test_report.aggregates,
            }
        if include_timing:
            payload["wall_clock_s"] = self.wall_clock_s
        return json.dumps(payload, indent=2, sort_keys=True)


def _prepare_corpus(config: TrainConfig):
    if config.corpus == "toy":
        workdir = Path(config.workdir) if config.workdir else Path.cwd() / "wavesep_workdir"
        corpus_dir = (
            workdir
            / f"toycorpus_s{config.seed}_n{config.toy_speakers}"
            f"_m{config.toy_minutes:g}_r{config.sample_rate}"
        )
        if (corpus_dir / "manifest.json").exists():
            return data_mod.load_corpus(corpus_dir)
        return data_mod.synth_toy_corpus(
            corpus_dir,
            n_speakers_per_class=config.toy_speakers,
            minutes=config.toy_minutes,
            seed=config.seed,
            sample_rate=config.sample_rate,
        )
    return data_mod.load_corpus(config.corpus)


def _trimmed_arrays(model, example):
    n = models_mod.estimate_length(model.spec, len(example.mixture))
    return (
        example.mixture.samples[:n],
        example.target.samples[:n],
        example.interference.samples[:n],
    )


def _term_values(loss, est, y, z, sample_rate):
    out = {}
    for _, term in loss.terms:
        try:
            v = float(losses_mod.term_value(term, est, y, z, sample_rate=sample_rate).data)
        except Exception as exc:  # diagnostic path only
            v = float("nan")
            out[f"{term.kind}.error"] = repr(exc)
        out[term.kind] = v
    return out


def train(config: TrainConfig):
    """Train per the config and return (model, report).

    The composite loss is calibrated to unity on the first batch, then
    the loop runs adaptive-moment updates with global gradient-norm
    clipping for max_steps, checkpointing periodically, and finishes with
    a held-out evaluation.
    """
    started = time.perf_counter()
    corpus = _prepare_corpus(config)
    model = models_mod.build(config.architecture())
    loss = losses_mod.parse_loss(config.loss)
    trainable = model.trainable_parameters()
    optimizer = (Adam(trainable, lr=config.learning_rate) if config.optimizer == "adam"
                 else SGD(trainable, lr=config.learning_rate))

    def epoch_batches():
        return data_mod.dataset_iter(
            corpus, config.minutes, config.batch_size, config.seed,
            dur_s=config.dur_s, split="train",
        )

    first_batch = next(epoch_batches())
    calib_triples = []
    for example in first_batch:
        mix, y, z = _trimmed_arrays(model, example)
        est, _ = models_mod.forward(model, mix)
        calib_triples.append((est.data, y, z))
    loss = losses_mod.calibrate_unity(loss, calib_triples, sample_rate=config.sample_rate)

    trace = []
    step = 0
    batches = iter(epoch_batches())
    while step < config.max_steps:
        try:
            batch = next(batches)
        except StopIteration:
            batches = iter(epoch_batches())
            batch = next(batches)
        ad.zero_grads(trainable)
        batch_loss = 0.0
        last_example = None
        for example in batch:
            mix, y, z = _trimmed_arrays(model, example)
            est, _ = models_mod.forward(model, mix)
            term = losses_mod.composite_eval(loss, est, y, z, sample_rate=config.sample_rate)
            scaled = ad.mul(term, 1.0 / len(batch))
            ad.backward(scaled)
            batch_loss += float(scaled.data)
            last_example = (est.data, y, z)
        if not np.isfinite(batch_loss):
            diag = _term_values(loss, *last_example, config.sample_rate)
            raise TrainingDivergedError(
                f"non-finite loss {batch_loss} at step {step}; term values: {diag}"
            )
        clip_gradients(trainable, config.grad_clip)
        optimizer.step()
        trace.append(batch_loss)
        step += 1
        if (config.checkpoint_every and config.checkpoint_path
                and step % config.checkpoint_every == 0):
            models_mod.save_checkpoint(model, config.checkpoint_path)

    if config.checkpoint_path:
        models_mod.save_checkpoint(model, config.checkpoint_path)

    test_examples = list(data_mod.dataset_examples(
        corpus, config.test_minutes, _test_seed(config.seed),
        dur_s=config.dur_s, split="test",
    ))
    report_rows = evaluate_examples(model, test_examples, workers=config.eval_workers)
    test_report = metrics_mod.aggregate(report_rows)

    report = ExperimentReport(
        config=_config_dict(config),
        loss_trace=trace,
        test_report=test_report,
        steps=step,
        wall_clock_s=time.perf_counter() - started,
    )
    if config.report_path:
        Path(config.report_path).write_text(report.to_json() + "\n")
    return model, report


def _test_seed(seed: int) -> int:
    # disjoint stream from training batches under the same master seed
    return seed + 0x5EED


def _config_dict(config: TrainConfig) -> dict:
    payload = dataclasses.asdict(config)
    payload["hidden"] = list(config.hidden)
    return payload


def _score_example(model, example) -> metrics_mod.MetricScores:
    if model == "mixture":
        est = example.mixture.samples
        y = example.target.samples
        z = example.interference.samples
    else:
        mix, y, z = _trimmed_arrays(model, example)
        est_t, _ = models_mod.forward(model, mix)
        est = est_t.data
    sdr, sir, sar = metrics_mod.bss_eval(est, y, z)
    stoi = metrics_mod.stoi_reference(est, y, example.target.sample_rate)
    return metrics_mod.MetricScores(sdr_db=sdr, sir_db=sir, sar_db=sar, stoi=stoi)


def evaluate_examples(model, examples, workers: int = 1):
    """Per-example scores; read-only model state makes this safely parallel."""
    examples = list(examples)
    if not examples:
        raise ConfigError("no evaluation examples")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda ex: _score_example(model, ex), examples))
    return [_score_example(model, ex) for ex in examples]


def examples_from_manifest(path) -> list[data_mod.MixtureExample]:
    """Evaluation manifest: triplet WAVs, or (target, interference) pairs
    mixed on the fly at pinned offsets."""
    with open(path) as fh:
        payload = json.load(fh)
    base = Path(path).parent
    out = []
    for entry in payload["examples"]:
        target = data_mod.load_wav(_resolve(base, entry["target_wav"]))
        interf = data_mod.load_wav(_resolve(base, entry["interference_wav"]))
        if "mixture_wav" in entry:
            mixture = data_mod.load_wav(_resolve(base, entry["mixture_wav"]))
            out.append(data_mod.MixtureExample(mixture=mixture, target=target,
                                               interference=interf, provenance=dict(entry)))
        else:
            out.append(data_mod.snip_and_mix(
                target, interf,
                target_offset=int(entry.get("target_offset", 0)),
                interf_offset=int(entry.get("interference_offset", 0)),
                dur_s=entry.get("dur_s"),
                provenance=dict(entry),
            ))
    return out


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def write_test_manifest(corpus, minutes, seed, dur_s, path):
    """Materialize a deterministic test-split manifest for `evaluate`."""
    entries = []
    for ex in data_mod.dataset_examples(corpus, minutes, seed, dur_s=dur_s, split="test"):
        prov = ex.provenance
        entries.append({
            "target_wav": prov["target_file"],
            "interference_wav": prov["interference_file"],
            "target_offset": prov["target_offset"],
            "interference_offset": prov["interference_offset"],
            "dur_s": dur_s,
        })
    with open(path, "w") as fh:
        json.dump({"examples": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def separate_file(model, in_path, out_path, *, unit_mask=False, dump_grids=None):
    """Run a checkpointed model over a WAV file and write the estimate."""
    from . import dsp

    wave = data_mod.load_wav(in_path)
    if wave.sample_rate != model.spec.sample_rate:
        raise ConfigError(
            f"checkpoint expects {model.spec.sample_rate} Hz, file is {wave.sample_rate} Hz"
        )
    est, internals = models_mod.forward(
        model, wave, net_override=1.0 if unit_mask else None
    )
    out = Waveform(est.data, wave.sample_rate)
    data_mod.save_wav(out_path, out, subtype="float32")
    if dump_grids:
        dump_dir = Path(dump_grids)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for name, grid in internals.items():
            values = grid.values if hasattr(grid, "values") else grid
            dsp.dump_matrix_csv(dump_dir / f"{name}.csv", values.data)
            dsp.dump_matrix_raw(dump_dir / f"{name}.f64", values.data)
        dsp.dump_matrix_csv(dump_dir / "analysis_filters.csv", model.analysis.filters.data)
        dsp.dump_matrix_raw(dump_dir / "analysis_filters.f64", model.analysis.filters.data)
        dsp.dump_matrix_raw(dump_dir / "synthesis_filters.f64", model.synthesis.filters.data)
    return out


def sweep(config: TrainConfig, axis: str, values=None, seeds=None):
    """One train+evaluate per axis point (per seed); aggregate rows out.

    Returns a list of dict rows with the axis value, seed, and
    median/p25/p75 for each metric.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; have {sorted(SWEEP_AXES)}")
    values = list(values) if values is not None else list(SWEEP_AXES[axis])
    seeds = list(seeds) if seeds is not None else [config.seed]
    rows = []
    for seed in seeds:
        for value in values:
            cfg = _apply_axis(config, axis, value, seed)
            _, report = train(cfg)
            row = {"axis": axis, "value": value, "seed": seed}
            for metric, stats in report.test_report.aggregates.items():
                for stat_name, stat in stats.items():
                    row[f"{metric}_{stat_name}"] = stat
            rows.append(row)
    return rows


def _apply_axis(config: TrainConfig, axis: str, value, seed) -> TrainConfig:
    updates = {"seed": int(seed)}
    if axis == "datasize":
        updates["minutes"] = float(value)
    elif axis == "stride":
        updates["stride"] = int(value)
    elif axis == "arch":
        updates["variant"] = str(value)
    elif axis == "loss":
        updates["loss"] = str(value)
    return dataclasses.replace(config, **updates)


def sweep_rows_to_csv(rows, path):
    import csv as csv_mod

    if not rows:
        raise ConfigError("no sweep rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv_mod.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
