"""Non-differentiable reference oracles for reporting and cross-checks.

``bss_eval`` projects the estimate onto the span of the true source and
interference at whole-signal scope and reports SDR/SIR/SAR in dB.
``stoi_reference`` is a deliberately separate implementation of the
intelligibility pipeline (direct per-frame loops, numpy rfft, its own
window and band-edge code) so it and the differentiable version can act
as mutual oracles.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dsp import Waveform
from .errors import DegenerateCorrelationError, ShapeError, TooFewFramesError

DB_CLAMP = 100.0


@dataclass
class MetricScores:
    sdr_db: float
    sir_db: float
    sar_db: float
    stoi: float


@dataclass
class SeparationReport:
    rows: list[MetricScores]
    aggregates: dict = field(default_factory=dict)

    def metric_values(self, name):
        return [getattr(r, name) for r in self.rows]


def _samples(x):
    if isinstance(x, Waveform):
        return np.asarray(x.samples, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _clamped_db(num, den):
    if num <= 0:
        return -DB_CLAMP
    if den <= 0:
        return DB_CLAMP
    return float(np.clip(10.0 * math.log10(num / den), -DB_CLAMP, DB_CLAMP))


def bss_decompose(x, y, z):
    """Orthogonal decomposition x = s_target + e_interf + e_artif.

    s_target is the projection of x onto y, e_interf the remainder of the
    projection onto span{y, z}, and e_artif everything outside the span.
    The 2x2 Gram system is solved with a pseudo-inverse so collinear
    references degrade gracefully.
    """
    x, y, z = _samples(x), _samples(y), _samples(z)
    if not (len(x) == len(y) == len(z)):
        raise ShapeError("bss_eval requires equal-length signals")
    yy = float(y @ y)
    zz = float(z @ z)
    if yy <= 0 or zz <= 0:
        raise DegenerateCorrelationError("bss_eval: zero-energy reference")
    gram = np.array([[yy, float(y @ z)], [float(y @ z), zz]])
    rhs = np.array([float(x @ y), float(x @ z)])
    coeffs = np.linalg.pinv(gram, rcond=1e-12) @ rhs
    s_target = (rhs[0] / yy) * y
    projection = coeffs[0] * y + coeffs[1] * z
    e_interf = projection - s_target
    e_artif = x - projection
    return s_target, e_interf, e_artif


def bss_eval(x, y, z):
    """(SDR, SIR, SAR) in dB, clamped to +/-100 for degenerate ratios."""
    s_target, e_interf, e_artif = bss_decompose(x, y, z)
    target_pow = float(s_target @ s_target)
    interf_pow = float(e_interf @ e_interf)
    artif_pow = float(e_artif @ e_artif)
    sdr = _clamped_db(target_pow, interf_pow + artif_pow)
    sir = _clamped_db(target_pow, interf_pow)
    kept = s_target + e_interf
    sar = _clamped_db(float(kept @ kept), artif_pow)
    return sdr, sir, sar


def stoi_reference(x, y, sample_rate: int, *, n_bands=15, lowest_center_hz=150.0,
                   fft_len=512, win_len=256, hop=128, context=30, beta_db=-15.0) -> float:
    """Reference STOI, coded independently of the differentiable version."""
    x, y = _samples(x), _samples(y)
    if len(x) != len(y):
        raise ShapeError("stoi_reference requires equal-length signals")
    if len(x) < win_len:
        raise TooFewFramesError("signal shorter than one analysis frame")
    n_frames = (len(x) - win_len) // hop + 1
    if n_frames < context:
        raise TooFewFramesError(f"{n_frames} frames < context {context}")

    window = np.array([0.5 - 0.5 * math.cos(2.0 * math.pi * t / win_len)
                       for t in range(win_len)])

    def band_bins(j):
        center = lowest_center_hz * 2.0 ** (j / 3.0)
        lo, hi = center * 2.0 ** (-1.0 / 6.0), center * 2.0 ** (1.0 / 6.0)
        bins = [i for i in range(fft_len // 2 + 1)
                if lo <= i * sample_rate / fft_len < hi]
        if not bins:
            raise ValueError(f"band {j} empty at this sample rate")
        return bins

    bands = [band_bins(j) for j in range(n_bands)]

    def envelope(sig):
        env = np.zeros((n_frames, n_bands))
        for m in range(n_frames):
            frame = sig[m * hop : m * hop + win_len] * window
            power = np.abs(np.fft.rfft(frame, fft_len)) ** 2
            for j, bins in enumerate(bands):
                env[m, j] = math.sqrt(sum(power[i] for i in bins))
        return env

    env_x = envelope(x)
    env_y = envelope(y)
    clip = 1.0 + 10.0 ** (-beta_db / 20.0)

    total, count = 0.0, 0
    for m in range(context - 1, n_frames):
        for j in range(n_bands):
            ctx_x = env_x[m - context + 1 : m + 1, j]
            ctx_y = env_y[m - context + 1 : m + 1, j]
            nx = math.sqrt(float(ctx_x @ ctx_x))
            ny = math.sqrt(float(ctx_y @ ctx_y))
            scaled = ctx_x * (ny / nx) if nx > 0 else np.zeros_like(ctx_x)
            clipped = np.minimum(scaled, clip * ctx_y)
            xc = clipped - clipped.mean()
            yc = ctx_y - ctx_y.mean()
            denom = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
            d = float(xc @ yc) / denom if denom > 1e-30 else 0.0
            total += d
            count += 1
    return total / count


def nearest_rank(sorted_values, pct):
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def aggregate(rows) -> SeparationReport:
    """Median and quartiles per metric over per-example scores."""
    rows = list(rows)
    if not rows:
        raise ValueError("aggregate: no rows")
    aggregates = {}
    for name in ("sdr_db", "sir_db", "sar_db", "stoi"):
        vals = sorted(getattr(r, name) for r in rows)
        aggregates[name] = {
            "median": nearest_rank(vals, 50),
            "p25": nearest_rank(vals, 25),
            "p75": nearest_rank(vals, 75),
        }
    return SeparationReport(rows=rows, aggregates=aggregates)


def report_to_csv(report: SeparationReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example", "sdr_db", "sir_db", "sar_db", "stoi"])
        for i, r in enumerate(report.rows):
            writer.writerow([i, repr(r.sdr_db), repr(r.sir_db), repr(r.sar_db), repr(r.stoi)])


def report_to_json(report: SeparationReport, path=None):
    payload = {
        "rows": [asdict(r) for r in report.rows],
        "aggregates": report.aggregates,
    }
    if path is None:
        return json.dumps(payload, indent=2, sort_keys=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return None
