"""Fixed and trainable short-time transforms.

Channel layout convention used throughout the package: a bank with
``n_freq`` frequencies has ``2 * n_freq`` rows, the first half cosine and
the second half sine, with the analysis window folded into the taps.
Masks, smoothing filters, and magnitude/phase pairing all index this
layout, so it is fixed here and nowhere else.

Synthesis from a Fourier-fixed bank divides by the precomputed
overlap-add normalizer ``n_freq * sum_n w^2(m - n*h)``; the basis-energy
factor makes the transpose an exact inverse at every stride that keeps
all interior samples covered.  Trainable banks apply no normalizer (the
filters learn it).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AudioFormatError, ConfigError, InputTooShortError, ShapeError

FOURIER_FIXED = "fourier-fixed"
TRAINABLE = "trainable"

CARRIER_EPS = 1e-8
PHASE_EPS = 1e-8
NORMALIZER_FLOOR = 1e-12

RAW_MAGIC = b"WSMAT64\x00"


@dataclass
class Waveform:
    """Mono audio samples (nominal [-1, 1] amplitude) at a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class LatentGrid:
    """A frames-by-channels tensor in the (learned or fixed) short-time domain."""

    values: Tensor
    semantics: str = "raw"

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]


@dataclass
class FilterBank:
    """K filters of N taps applied at a fixed stride.

    ``window`` and ``n_freq`` are only set for the Fourier-fixed kind,
    where they drive the synthesis normalizer.
    """

    filters: Tensor
    stride: int
    kind: str = TRAINABLE
    window: np.ndarray | None = None
    n_freq: int | None = None
    _norm_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.filters.data.ndim != 2:
            raise ShapeError(f"filter taps must be 2-D, got {self.filters.shape}")
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def filter_len(self):
        return self.filters.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window w(t) = 0.5 * (1 - cos(2*pi*t/n))."""
    t = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / n))


def build_fourier_filterbank(window_len: int, stride: int, n_freq: int | None = None) -> FilterBank:
    """Fixed bank of windowed cosine rows stacked over windowed sine rows.

    Row k < n_freq is w(t)*cos(2*pi*k*t/window_len) and row n_freq + k is
    w(t)*sin(2*pi*k*t/window_len), with w the periodic Hann window.  The
    default n_freq = window_len covers the full index range k = 0 ..
    window_len - 1, which makes transpose synthesis (with the normalizer)
    an exact inverse; n_freq = window_len // 2 halves the channel count at
    the cost of an approximate round trip.
    """
    if window_len % 2 != 0:
        raise ConfigError(f"window_len must be even, got {window_len}")
    if n_freq is None:
        n_freq = window_len
    if n_freq < 1:
        raise ConfigError(f"n_freq must be positive, got {n_freq}")
    w = hann_window(window_len)
    t = np.arange(window_len)
    k = np.arange(n_freq)[:, None]
    phase = 2.0 * np.pi * k * t[None, :] / window_len
    taps = np.vstack([np.cos(phase) * w, np.sin(phase) * w])
    return FilterBank(
        filters=Tensor(taps, op="fourier_taps"),
        stride=stride,
        kind=FOURIER_FIXED,
        window=w,
        n_freq=n_freq,
    )


def rectangular_smoothing(n_channels: int, length: int) -> np.ndarray:
    """Per-channel moving-average taps of value 1/length."""
    if length < 1:
        raise ConfigError(f"smoothing length must be >= 1, got {length}")
    return np.full((n_channels, length), 1.0 / length)


def as_signal_tensor(x) -> Tensor:
    if isinstance(x, Waveform):
        return Tensor(x.samples)
    return ad.as_tensor(x)


def analyze(x, fb: FilterBank) -> LatentGrid:
    """Short-time transform of a 1-D signal: frame-wise inner products
    with the bank's taps at the bank's stride."""
    sig = as_signal_tensor(x)
    if sig.size < fb.filter_len:
        raise InputTooShortError(
            f"signal length {sig.size} < filter length {fb.filter_len}"
        )
    return LatentGrid(ad.conv1d(sig, fb.filters, fb.stride), semantics="raw")


def magnitude_phase_pair(x: LatentGrid, n_freq: int):
    """Split a raw cos/sin grid into per-pair magnitudes and unit phase pairs.

    magnitude[n, k] = sqrt(cos[n, k]^2 + sin[n, k]^2); the phase pair is
    the raw grid divided by max(magnitude, eps), so zero frames map to
    zero phase (documented degenerate case) and the recombination
    magnitude (tiled) * phase_pair reproduces the raw grid exactly
    wherever the magnitude exceeds the guard.
    """
    v = x.values
    if v.shape[1] != 2 * n_freq:
        raise ConfigError(f"grid has {v.shape[1]} channels, expected {2 * n_freq}")
    cos_half = ad.narrow(v, 1, 0, n_freq)
    sin_half = ad.narrow(v, 1, n_freq, n_freq)
    mag = ad.sqrt_guarded(ad.add(ad.square(cos_half), ad.square(sin_half)), eps=1e-300)
    mag_pair = ad.concat(mag, mag, axis=1)
    phase = ad.div_maxguard(v, mag_pair, eps=PHASE_EPS)
    return LatentGrid(mag, semantics="magnitude"), LatentGrid(phase, semantics="phase-pair")


def recombine_magnitude_phase(mag, phase_pair: LatentGrid) -> LatentGrid:
    """Inverse of magnitude_phase_pair: tile magnitudes over both halves
    and modulate by the phase pair."""
    mag_v = mag.values if isinstance(mag, LatentGrid) else ad.as_tensor(mag)
    tiled = ad.concat(mag_v, mag_v, axis=1)
    return LatentGrid(ad.mul(tiled, phase_pair.values), semantics="raw")


def smooth_rectify(x: LatentGrid, smoothing: FilterBank) -> LatentGrid:
    """Rectify and causally smooth a raw grid into a modulation grid.

    Each channel of |X| is convolved across time with that channel's
    smoothing filter, averaging the current and length-1 previous frames
    (zero-padded at the start, so the first frames are partial averages),
    then passed through softplus; the result is strictly positive.
    """
    v = x.values
    taps = smoothing.filters
    k, ls = taps.shape
    if v.shape[1] != k:
        raise ConfigError(f"grid has {v.shape[1]} channels, smoothing bank has {k}")
    rect = ad.absolute(v)
    if ls == 1:
        pre = ad.mul(rect, ad.transpose(taps))
    else:
        pad = Tensor(np.zeros((ls - 1, k)))
        padded = ad.concat(pad, rect, axis=0)
        windows = ad.unfold_time(padded, ls)  # [T, ls, K]
        # windows[n, j, k] covers frame n - (ls - 1 - j); lag i pairs with tap s[k, i]
        lagged_taps = ad.transpose(ad.flip(taps, axis=1))  # [ls, K]
        pre = ad.reduce_sum(ad.mul(windows, lagged_taps), axis=1)
    return LatentGrid(ad.softplus(pre), semantics="modulation")


def carrier(x: LatentGrid, m: LatentGrid) -> LatentGrid:
    """Elementwise ratio X / M (guarded); restores what rectification and
    smoothing removed, playing the role of phase."""
    if x.values.shape != m.values.shape:
        raise ShapeError(f"carrier: shapes {x.values.shape} vs {m.values.shape}")
    return LatentGrid(ad.div_guarded(x.values, m.values, eps=CARRIER_EPS), semantics="carrier")


def ola_normalizer(fb: FilterBank, n_frames: int) -> np.ndarray:
    """Per-sample synthesis divisor n_freq * sum_n w^2(m - n*h), floored."""
    if fb.kind != FOURIER_FIXED:
        raise ConfigError("normalizer is only defined for the Fourier-fixed kind")
    cached = fb._norm_cache.get(n_frames)
    if cached is not None:
        return cached
    n = fb.filter_len
    out_len = (n_frames - 1) * fb.stride + n
    w2 = fb.window * fb.window
    norm = np.zeros(out_len)
    for c in range(n):
        norm[c : c + fb.stride * n_frames : fb.stride] += w2[c]
    norm = np.maximum(fb.n_freq * norm, NORMALIZER_FLOOR)
    fb._norm_cache[n_frames] = norm
    return norm


def synthesize(grid: LatentGrid, fb: FilterBank) -> Tensor:
    """Transposed convolution back to the time domain.

    Fourier-fixed banks divide by the overlap-add normalizer so the
    analyze -> synthesize round trip reconstructs interior samples
    exactly; trainable banks return the raw overlap-add.
    """
    if grid.values.shape[1] != fb.n_filters:
        raise ConfigError(
            f"grid has {grid.values.shape[1]} channels, bank has {fb.n_filters} filters"
        )
    y = ad.transposed_conv1d(grid.values, fb.filters, fb.stride)
    if fb.kind == FOURIER_FIXED:
        inv = Tensor(1.0 / ola_normalizer(fb, grid.n_frames))
        y = ad.mul(y, inv)
    return y


def valid_length(input_len: int, window_len: int, stride: int) -> int:
    """Sample count of the synthesizable region for a given input length."""
    if input_len < window_len:
        raise InputTooShortError(f"input length {input_len} < window {window_len}")
    n_frames = (input_len - window_len) // stride + 1
    return (n_frames - 1) * stride + window_len


def dump_matrix_csv(path, matrix):
    """Write a 2-D array as CSV, one frame (row) per line."""
    arr = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in arr:
            writer.writerow([repr(float(v)) for v in row])


def dump_matrix_raw(path, matrix):
    """Write an array as little-endian float64 with a small header.

    Layout: 8-byte magic, uint32 ndim, ndim * uint64 dims, then the
    row-major payload.
    """
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_matrix_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != RAW_MAGIC:
            raise AudioFormatError(f"bad magic in {path!s}: {magic!r}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        payload = fh.read()
    expected = int(np.prod(dims)) * 8
    if len(payload) != expected:
        raise AudioFormatError(f"truncated container {path!s}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
