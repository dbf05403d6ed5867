"""The seven end-to-end separation architectures as differentiable graphs.

Variant wiring (all operate on the mixture waveform and emit the
estimated source waveform):

  stft               fixed Fourier bank; net maps magnitudes; mixture
                     phase modulates the net output before synthesis
  stft_smoothed      fixed Fourier bank; net maps the smoothed/rectified
                     modulation grid; carrier modulates the output
  stft_smoothed_mask as above, but the net emits a sigmoid mask applied
                     to modulation * carrier
  aet / aet_mask     trainable bank shared between analysis and synthesis
  full_aet / *_mask  independently trainable analysis and synthesis banks

Smoothing filters are fixed rectangular averages for the stft_smoothed
variants and trainable (rectangular-initialized) for the adaptive ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Parameter, Tensor
from .dsp import FilterBank, LatentGrid, Waveform
from .errors import AudioFormatError, ConfigError

VARIANTS = (
    "stft",
    "stft_smoothed",
    "stft_smoothed_mask",
    "aet",
    "aet_mask",
    "full_aet",
    "full_aet_mask",
)

MASK_VARIANTS = ("stft_smoothed_mask", "aet_mask", "full_aet_mask")

CHECKPOINT_MAGIC = b"WSCKPT01"


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str
    window_len: int = 1024
    stride: int = 16
    smoothing_len: int = 5
    hidden: tuple[int, ...] = (512, 512, 512)
    n_freq: int | None = None  # None -> window_len (exact-reconstruction bank)
    sample_rate: int = 16000
    seed: int = 0
    fourier_init: bool = False  # initialize trainable banks from Fourier taps

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.stride < 1 or self.stride > self.window_len:
            raise ConfigError("stride must be in [1, window_len]")
        if not self.hidden:
            raise ConfigError("hidden layer list must be nonempty")
        if self.smoothing_len < 1:
            raise ConfigError("smoothing_len must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def resolved_n_freq(self):
        return self.n_freq if self.n_freq is not None else self.window_len

    @property
    def latent_channels(self):
        return 2 * self.resolved_n_freq

    @property
    def dense_width(self):
        """Per-frame input/output width of the separation network."""
        return self.resolved_n_freq if self.variant == "stft" else self.latent_channels

    @property
    def is_mask(self):
        return self.variant in MASK_VARIANTS

    @property
    def uses_smoothing(self):
        return self.variant != "stft"

    @property
    def trainable_frontend(self):
        return self.variant.startswith(("aet", "full_aet"))

    @property
    def shared_frontend(self):
        return self.variant in ("aet", "aet_mask")


@dataclass
class SeparationModel:
    spec: ArchitectureSpec
    analysis: FilterBank
    synthesis: FilterBank
    smoothing: FilterBank | None
    layers: list[tuple[Parameter, Parameter]]
    params: dict[str, Parameter] = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def trainable_parameters(self):
        """Depth-ordered trainable parameters (banks, smoothing, dense)."""
        return [p for p in self.params.values() if p.trainable]


def build(spec: ArchitectureSpec) -> SeparationModel:
    """Construct a model with seeded initialization.

    Trainable filter taps are uniform(-a, a) with a = sqrt(1/window_len)
    (or copies of the Fourier taps under ``fourier_init``); dense weights
    are uniform scaled by sqrt(1/fan_in) with zero biases.  For the aet
    variants the synthesis bank aliases the analysis parameter, so the
    tying survives any number of updates by construction.
    """
    rng = np.random.default_rng(spec.seed)
    n_freq = spec.resolved_n_freq
    k_latent = spec.latent_channels
    params: dict[str, Parameter] = {}

    fixed = not spec.trainable_frontend
    if fixed:
        bank = dsp.build_fourier_filterbank(spec.window_len, spec.stride, n_freq)
        frontend = Parameter(bank.filters, name="analysis.filters", trainable=False)
        params[frontend.name] = frontend
        analysis = bank
        synthesis = bank
    else:
        scale = np.sqrt(1.0 / spec.window_len)

        def bank_taps():
            if spec.fourier_init:
                return dsp.build_fourier_filterbank(spec.window_len, spec.stride, n_freq).filters.data
            return rng.uniform(-scale, scale, size=(k_latent, spec.window_len))

        analysis_p = Parameter(Tensor(bank_taps(), op="bank"), name="analysis.filters")
        params[analysis_p.name] = analysis_p
        analysis = FilterBank(analysis_p.node, spec.stride, kind=dsp.TRAINABLE)
        if spec.shared_frontend:
            synthesis = FilterBank(analysis_p.node, spec.stride, kind=dsp.TRAINABLE)
        else:
            synthesis_p = Parameter(Tensor(bank_taps(), op="bank"), name="synthesis.filters")
            params[synthesis_p.name] = synthesis_p
            synthesis = FilterBank(synthesis_p.node, spec.stride, kind=dsp.TRAINABLE)

    smoothing = None
    if spec.uses_smoothing:
        taps = dsp.rectangular_smoothing(k_latent, spec.smoothing_len)
        smoothing_p = Parameter(
            Tensor(taps, op="smoothing"),
            name="smoothing.filters",
            trainable=spec.trainable_frontend,
        )
        params[smoothing_p.name] = smoothing_p
        smoothing = FilterBank(smoothing_p.node, 1, kind=dsp.TRAINABLE)

    layers = []
    widths = [spec.dense_width, *spec.hidden, spec.dense_width]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        s = np.sqrt(1.0 / fan_in)
        w = Parameter(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), op="dense_w"),
                      name=f"dense{i}.weight")
        b = Parameter(Tensor(np.zeros(fan_out), op="dense_b"), name=f"dense{i}.bias")
        params[w.name] = w
        params[b.name] = b
        layers.append((w, b))

    return SeparationModel(spec=spec, analysis=analysis, synthesis=synthesis,
                           smoothing=smoothing, layers=layers, params=params)


def _dense_stack(model: SeparationModel, h: Tensor) -> Tensor:
    *hidden_layers, (w_out, b_out) = model.layers
    for w, b in hidden_layers:
        h = ad.softplus(ad.dense(h, w.node, b.node))
    out = ad.dense(h, w_out.node, b_out.node)
    return ad.sigmoid(out) if model.spec.is_mask else ad.softplus(out)


def _as_override(net_override, shape) -> Tensor:
    if isinstance(net_override, Tensor):
        return net_override
    arr = np.asarray(net_override, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def forward(model: SeparationModel, mixture, net_override=None):
    """Mixture waveform -> (estimate tensor, internals).

    ``net_override`` bypasses the separation network with a fixed grid
    (scalar, array, or tensor); it is used by the unit-mask diagnostics.
    The estimate covers the synthesizable region of the input:
    (n_frames - 1) * stride + window_len samples.
    """
    spec = model.spec
    if isinstance(mixture, Waveform) and mixture.sample_rate != spec.sample_rate:
        raise ConfigError(
            f"model expects {spec.sample_rate} Hz, got {mixture.sample_rate} Hz"
        )
    x = dsp.as_signal_tensor(mixture)
    raw = dsp.analyze(x, model.analysis)
    internals = {"X": raw}

    if spec.variant == "stft":
        mag, phase = dsp.magnitude_phase_pair(raw, spec.resolved_n_freq)
        internals["magnitude"] = mag
        internals["phase_pair"] = phase
        net = (_as_override(net_override, mag.values.shape) if net_override is not None
               else _dense_stack(model, mag.values))
        internals["net_out"] = net
        grid = dsp.recombine_magnitude_phase(net, phase)
    else:
        m = dsp.smooth_rectify(raw, model.smoothing)
        c = dsp.carrier(raw, m)
        internals["M"] = m
        internals["C"] = c
        net = (_as_override(net_override, m.values.shape) if net_override is not None
               else _dense_stack(model, m.values))
        internals["net_out"] = net
        if spec.is_mask:
            source = ad.mul(ad.mul(net, m.values), c.values)
        else:
            source = ad.mul(net, c.values)
        grid = LatentGrid(source, semantics="source")

    estimate = dsp.synthesize(grid, model.synthesis)
    return estimate, internals


def estimate_length(spec: ArchitectureSpec, input_len: int) -> int:
    return dsp.valid_length(input_len, spec.window_len, spec.stride)


def dense_parameter_count(spec: ArchitectureSpec) -> int:
    """Closed-form separation-network parameter count from the widths."""
    widths = [spec.dense_width, *spec.hidden, spec.dense_width]
    return sum(fi * fo + fo for fi, fo in zip(widths[:-1], widths[1:]))


def save_checkpoint(model: SeparationModel, path):
    """Named-tensor container: magic, JSON directory, float64 LE payload."""
    entries = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "trainable": p.trainable,
        })
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(
        {"spec": asdict(model.spec), "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> SeparationModel:
    """Rebuild a model whose forward outputs match the saved one bitwise."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise AudioFormatError(f"not a checkpoint file: {path!s}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len))
        payload = fh.read()
    spec_dict = dict(header["spec"])
    spec_dict["hidden"] = tuple(spec_dict["hidden"])
    spec = ArchitectureSpec(**spec_dict)
    model = build(spec)
    for entry in header["tensors"]:
        p = model.params.get(entry["name"])
        if p is None:
            raise AudioFormatError(f"unknown tensor {entry['name']!r} in checkpoint")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        p.data = arr.reshape(shape).copy()
    return model
