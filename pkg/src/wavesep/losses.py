"""Differentiable waveform-domain training objectives.

The correlation-ratio forms below are minimization surrogates: driving
each one down maximizes the corresponding evaluation metric.  With x the
network output, y the target source, and z the interference (y and z are
constants with respect to the optimization):

    sdr(x, y)    = <x,x> / <x,y>^2
    sir(x, y, z) = <x,z>^2 / <x,y>^2
    sar(x, y, z) = <x,x> / (<x,y>^2/<y,y> + <x,z>^2/<z,z>)

STOI is computed in full (one-third-octave envelopes, 30-frame context
vectors, scale-and-clip, centered correlation) and enters composites
negated.  The clip is an exact elementwise min whose subgradient follows
the attaining argument (ties go to the scaled-estimate branch).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import Waveform, hann_window
from .errors import (
    CalibrationError,
    ConfigError,
    DegenerateCorrelationError,
    ShapeError,
    TooFewFramesError,
)

EPS_CORR = 1e-12  # floor on squared correlations; below this we abort
_STOI_GUARD = 1e-30  # pure-ratio guards inside the STOI pipeline
_BAND_POWER_EPS = 1e-24  # bounds the sqrt gradient on silent bands

TERM_KINDS = ("mse", "neg_sdr", "neg_sir", "neg_sar", "neg_stoi")

_TERM_NAMES = {
    "mse": "mse",
    "sdr": "neg_sdr",
    "sir": "neg_sir",
    "sar": "neg_sar",
    "stoi": "neg_stoi",
}


@dataclass(frozen=True)
class LossTerm:
    kind: str
    norm_const: float = 1.0

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ConfigError(f"unknown loss term {self.kind!r}")
        if not (self.norm_const > 0):
            raise ConfigError(f"norm_const must be positive, got {self.norm_const}")


@dataclass(frozen=True)
class CompositeLoss:
    terms: tuple[tuple[float, LossTerm], ...]

    def __post_init__(self):
        if not self.terms:
            raise ConfigError("composite loss needs at least one term")
        for weight, _ in self.terms:
            if not np.isfinite(weight):
                raise ConfigError(f"non-finite loss weight {weight}")

    def needs_interference(self):
        return any(t.kind in ("neg_sir", "neg_sar") for _, t in self.terms)


@dataclass(frozen=True)
class StoiConfig:
    fft_len: int = 512
    win_len: int = 256
    hop: int = 128
    n_bands: int = 15
    lowest_center_hz: float = 150.0
    context: int = 30
    beta_db: float = -15.0

    @property
    def clip_factor(self):
        return 1.0 + 10.0 ** (-self.beta_db / 20.0)


DEFAULT_STOI = StoiConfig()

_TERM_RE = re.compile(r"^(?:(\d+(?:\.\d+)?|\.\d+)\s*\*\s*)?([a-z]+)$")


def parse_loss(text: str) -> CompositeLoss:
    """Parse a loss grammar string like "sdr" or "0.75*sdr+0.25*stoi"."""
    terms = []
    for chunk in text.lower().split("+"):
        m = _TERM_RE.match(chunk.strip())
        if m is None:
            raise ConfigError(f"cannot parse loss term {chunk!r}")
        weight = float(m.group(1)) if m.group(1) else 1.0
        name = m.group(2)
        if name not in _TERM_NAMES:
            raise ConfigError(f"unknown loss name {name!r} in {text!r}")
        terms.append((weight, LossTerm(_TERM_NAMES[name])))
    return CompositeLoss(tuple(terms))


def format_loss(loss: CompositeLoss) -> str:
    rev = {v: k for k, v in _TERM_NAMES.items()}
    return "+".join(f"{w:g}*{rev[t.kind]}" for w, t in loss.terms)


def _as_wave_tensor(x) -> Tensor:
    if isinstance(x, Waveform):
        return Tensor(x.samples)
    return ad.as_tensor(x)


def _pair(x, y, op):
    x, y = _as_wave_tensor(x), _as_wave_tensor(y)
    if x.size != y.size:
        raise ShapeError(f"{op}: length mismatch {x.size} vs {y.size}")
    return x, y


def mse_loss(x, y) -> Tensor:
    x, y = _pair(x, y, "mse")
    return ad.mean(ad.square(ad.sub(x, y)))


def _checked_corr(x, y, what):
    xy = ad.dot(x, y)
    if float(xy.data) ** 2 <= EPS_CORR:
        raise DegenerateCorrelationError(f"{what}: <x,y>^2 below {EPS_CORR}")
    return xy


def sdr_loss(x, y) -> Tensor:
    """<x,x>/<x,y>^2; minimized when x is proportional to y."""
    x, y = _pair(x, y, "sdr")
    xy = _checked_corr(x, y, "sdr")
    return ad.div(ad.dot(x, x), ad.square(xy))


def sir_loss(x, y, z) -> Tensor:
    """<x,z>^2/<x,y>^2; zero iff x is orthogonal to the interference."""
    x, y = _pair(x, y, "sir")
    _, z = _pair(x, z, "sir")
    xy = _checked_corr(x, y, "sir")
    return ad.div(ad.square(ad.dot(x, z)), ad.square(xy))


def sar_loss(x, y, z) -> Tensor:
    """<x,x> / (<x,y>^2/<y,y> + <x,z>^2/<z,z>); symmetric in (y, z)."""
    x, y = _pair(x, y, "sar")
    _, z = _pair(x, z, "sar")
    yy = float(np.dot(y.data, y.data))
    zz = float(np.dot(z.data, z.data))
    if yy <= 0 or zz <= 0:
        raise DegenerateCorrelationError("sar: zero reference energy")
    denom = ad.add(
        ad.mul(ad.square(ad.dot(x, y)), 1.0 / yy),
        ad.mul(ad.square(ad.dot(x, z)), 1.0 / zz),
    )
    if float(denom.data) <= EPS_CORR:
        raise DegenerateCorrelationError(f"sar: denominator below {EPS_CORR}")
    return ad.div(ad.dot(x, x), denom)


@lru_cache(maxsize=8)
def _stoi_bank(fft_len: int, win_len: int) -> np.ndarray:
    """Windowed cos/sin taps realizing a zero-padded rfft as a convolution."""
    n_bins = fft_len // 2 + 1
    w = hann_window(win_len)
    t = np.arange(win_len)
    k = np.arange(n_bins)[:, None]
    phase = 2.0 * np.pi * k * t[None, :] / fft_len
    return np.vstack([np.cos(phase) * w, np.sin(phase) * w])


def third_octave_band_matrix(cfg: StoiConfig, sample_rate: int) -> np.ndarray:
    """0/1 selection matrix [n_bands x fft bins] over one-third octave bands.

    Band j has center 2^(j/3) * lowest_center_hz and spans
    [center / 2^(1/6), center * 2^(1/6)); adjacent bands tile the axis, so
    every bin lands in at most one band.  Bands are truncated at Nyquist;
    a band with no bins at the configured resolution is a config error.
    """
    n_bins = cfg.fft_len // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.fft_len
    mat = np.zeros((cfg.n_bands, n_bins))
    half_band = 2.0 ** (1.0 / 6.0)
    for j in range(cfg.n_bands):
        center = cfg.lowest_center_hz * 2.0 ** (j / 3.0)
        sel = (bin_hz >= center / half_band) & (bin_hz < center * half_band)
        if not sel.any():
            raise ConfigError(
                f"one-third octave band {j} (center {center:.1f} Hz) is empty "
                f"at fft_len={cfg.fft_len}, sample_rate={sample_rate}"
            )
        mat[j, sel] = 1.0
    return mat


def _band_envelope(sig: Tensor, bank: np.ndarray, band_mat: np.ndarray, hop: int) -> Tensor:
    """[frames x bands] envelope: sqrt of per-band summed spectral power."""
    n_bins = band_mat.shape[1]
    grid = ad.conv1d(sig, Tensor(bank), hop)
    power = ad.add(
        ad.square(ad.narrow(grid, 1, 0, n_bins)),
        ad.square(ad.narrow(grid, 1, n_bins, n_bins)),
    )
    return ad.sqrt_guarded(ad.matmul(power, Tensor(band_mat.T)), eps=_BAND_POWER_EPS)


def stoi_value(x, y, cfg: StoiConfig = DEFAULT_STOI, sample_rate: int = 16000) -> Tensor:
    """Short-term objective intelligibility of estimate x against reference y.

    Returns a scalar in [-1, 1], differentiable with respect to x; equals
    1 for x = y (and for any positive rescaling of x, absorbed by the
    per-context normalization).  Context vectors with zero variance
    contribute 0 (documented degenerate case).
    """
    x, y = _pair(x, y, "stoi")
    if x.size < cfg.win_len:
        raise TooFewFramesError(f"signal of {x.size} samples is shorter than one frame")
    n_frames = (x.size - cfg.win_len) // cfg.hop + 1
    if n_frames < cfg.context:
        raise TooFewFramesError(
            f"{n_frames} frames < context {cfg.context}; need longer signals"
        )
    bank = _stoi_bank(cfg.fft_len, cfg.win_len)
    band_mat = third_octave_band_matrix(cfg, sample_rate)

    env_x = _band_envelope(x, bank, band_mat, cfg.hop)
    env_y = _band_envelope(y, bank, band_mat, cfg.hop)

    ctx_x = ad.unfold_time(env_x, cfg.context)  # [M, N, bands]
    ctx_y = ad.unfold_time(env_y, cfg.context)

    norm_x = ad.sqrt_guarded(ad.reduce_sum(ad.square(ctx_x), axis=1, keepdims=True), eps=_STOI_GUARD)
    norm_y = ad.sqrt_guarded(ad.reduce_sum(ad.square(ctx_y), axis=1, keepdims=True), eps=_STOI_GUARD)
    scaled = ad.mul(ctx_x, ad.div_guarded(norm_y, norm_x, eps=_STOI_GUARD))
    clipped = ad.minimum(scaled, ad.mul(ctx_y, cfg.clip_factor))

    xc = ad.sub(clipped, ad.mean(clipped, axis=1, keepdims=True))
    yc = ad.sub(ctx_y, ad.mean(ctx_y, axis=1, keepdims=True))
    num = ad.reduce_sum(ad.mul(xc, yc), axis=1, keepdims=True)
    den = ad.mul(
        ad.sqrt_guarded(ad.reduce_sum(ad.square(xc), axis=1, keepdims=True), eps=_STOI_GUARD),
        ad.sqrt_guarded(ad.reduce_sum(ad.square(yc), axis=1, keepdims=True), eps=_STOI_GUARD),
    )
    d = ad.div_guarded(num, den, eps=_STOI_GUARD)
    return ad.mean(d)


def term_value(term: LossTerm, x, y, z=None, *, stoi_cfg=DEFAULT_STOI, sample_rate=16000) -> Tensor:
    """Un-normalized value of a single term (neg_stoi contributes -stoi)."""
    if term.kind == "mse":
        return mse_loss(x, y)
    if term.kind == "neg_sdr":
        return sdr_loss(x, y)
    if term.kind == "neg_sir":
        if z is None:
            raise ConfigError("sir term needs an interference signal")
        return sir_loss(x, y, z)
    if term.kind == "neg_sar":
        if z is None:
            raise ConfigError("sar term needs an interference signal")
        return sar_loss(x, y, z)
    if term.kind == "neg_stoi":
        return ad.mul(stoi_value(x, y, stoi_cfg, sample_rate), -1.0)
    raise ConfigError(f"unknown term kind {term.kind!r}")


def composite_eval(loss: CompositeLoss, x, y, z=None, *, stoi_cfg=DEFAULT_STOI, sample_rate=16000) -> Tensor:
    """Weighted, unity-normalized sum of the composite's terms."""
    total = None
    for weight, term in loss.terms:
        v = term_value(term, x, y, z, stoi_cfg=stoi_cfg, sample_rate=sample_rate)
        v = ad.mul(v, weight / term.norm_const)
        total = v if total is None else ad.add(total, v)
    return total


def calibrate_unity(loss: CompositeLoss, first_batch, *, stoi_cfg=DEFAULT_STOI, sample_rate=16000) -> CompositeLoss:
    """Set each term's norm_const to |mean term value| over the first batch.

    After calibration each term's mean magnitude on that batch is exactly
    1, which makes composite weights meaningful.  Idempotent on the same
    batch.  A term whose batch mean is (numerically) zero aborts: the
    batch is degenerate for that term.
    """
    if not first_batch:
        raise CalibrationError("calibration batch is empty")
    new_terms = []
    for weight, term in loss.terms:
        values = [
            float(term_value(term, x, y, z, stoi_cfg=stoi_cfg, sample_rate=sample_rate).data)
            for x, y, z in first_batch
        ]
        norm = abs(float(np.mean(values)))
        if norm < 1e-12:
            raise CalibrationError(
                f"term {term.kind} mean {np.mean(values):.3e} too small to normalize"
            )
        new_terms.append((weight, replace(term, norm_const=norm)))
    return CompositeLoss(tuple(new_terms))
