import numpy as np
import pytest

from wavesep import autodiff as ad
from wavesep import dsp
from wavesep.autodiff import Tensor
from wavesep.dsp import (
    FilterBank,
    LatentGrid,
    Waveform,
    analyze,
    build_fourier_filterbank,
    carrier,
    hann_window,
    magnitude_phase_pair,
    smooth_rectify,
    synthesize,
)
from wavesep.errors import AudioFormatError, ConfigError, InputTooShortError


def grid(values, semantics="raw"):
    return LatentGrid(Tensor(np.asarray(values, dtype=float)), semantics)


class TestFourierFilterbank:
    def test_sine_row_zero_is_all_zeros(self):
        fb = build_fourier_filterbank(16, 4)
        np.testing.assert_allclose(fb.filters.data[fb.n_freq], 0.0, atol=1e-15)

    def test_cosine_row_zero_is_the_window(self):
        fb = build_fourier_filterbank(16, 4)
        np.testing.assert_allclose(fb.filters.data[0], hann_window(16), atol=1e-15)

    def test_tone_energy_concentrates_at_its_channel(self):
        # cos(2*pi*8*t/1024) analyzed with one full-window frame; the
        # cosine channel 8 response must match the direct Fourier sum
        n = 1024
        tt = np.arange(n)
        x = np.cos(2 * np.pi * 8 * tt / n)
        fb = build_fourier_filterbank(n, n)
        out = analyze(Waveform(x, 16000), fb).values.data[0]
        w = hann_window(n)
        direct = np.array([np.sum(x * w * np.cos(2 * np.pi * k * tt / n)) for k in range(n)])
        np.testing.assert_allclose(out[:n], direct, atol=1e-9)
        cos_energy = out[:n] ** 2
        # peak at channel 8 (mirror at n-8); outside the Hann main lobe
        # (+-1 channel) everything is negligible
        assert np.argmax(cos_energy[: n // 2]) == 8
        lobe = {7, 8, 9, n - 9, n - 8, n - 7}
        others = np.delete(cos_energy, sorted(lobe))
        assert others.max() < 1e-6 * cos_energy[8]

    def test_odd_window_rejected(self):
        with pytest.raises(ConfigError):
            build_fourier_filterbank(15, 4)


class TestAnalyze:
    def test_impulse_first_frame_is_filter_column_zero(self):
        fb = build_fourier_filterbank(16, 16)
        x = np.zeros(32)
        x[0] = 1.0
        out = analyze(Waveform(x, 16000), fb)
        np.testing.assert_allclose(out.values.data[0], fb.filters.data[:, 0], atol=1e-15)

    def test_dc_signal_has_no_sine_response(self):
        fb = build_fourier_filterbank(32, 8)
        out = analyze(Waveform(np.ones(96), 16000), fb)
        sines = out.values.data[:, fb.n_freq :]
        assert np.max(np.abs(sines)) < 1e-10

    def test_matches_short_time_double_loop(self):
        # brute-force evaluation of the generalized short-time transform
        rng = np.random.default_rng(0)
        x = rng.standard_normal(80)
        fb = build_fourier_filterbank(16, 8, n_freq=4)
        got = analyze(Waveform(x, 16000), fb).values.data
        k_taps = fb.filters.data
        frames = (80 - 16) // 8 + 1
        expected = np.zeros((frames, 8))
        for n in range(frames):
            for k in range(8):
                for tau in range(16):
                    expected[n, k] += x[n * 8 + tau] * k_taps[k, tau]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_too_short_input(self):
        fb = build_fourier_filterbank(32, 8)
        with pytest.raises(InputTooShortError):
            analyze(Waveform(np.zeros(16), 16000), fb)


class TestMagnitudePhase:
    def test_three_four_five(self):
        x = grid([[3.0, 4.0]])
        mag, phase = magnitude_phase_pair(x, 1)
        assert mag.values.data[0, 0] == pytest.approx(5.0)
        np.testing.assert_allclose(phase.values.data[0], [0.6, 0.8], atol=1e-12)

    def test_zero_frame_guarded(self):
        mag, phase = magnitude_phase_pair(grid([[0.0, 0.0]]), 1)
        assert mag.values.data[0, 0] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(phase.values.data[0], 0.0)

    def test_recombination_roundtrip(self):
        rng = np.random.default_rng(1)
        x = grid(rng.standard_normal((7, 10)))
        mag, phase = magnitude_phase_pair(x, 5)
        back = dsp.recombine_magnitude_phase(mag, phase)
        assert np.max(np.abs(back.values.data - x.values.data)) < 1e-9

    def test_unit_norm_pairs(self):
        rng = np.random.default_rng(2)
        x = grid(rng.standard_normal((5, 8)))
        mag, phase = magnitude_phase_pair(x, 4)
        p = phase.values.data
        norms = np.sqrt(p[:, :4] ** 2 + p[:, 4:] ** 2)
        live = mag.values.data > 1e-6
        np.testing.assert_allclose(norms[live], 1.0, atol=1e-9)


class TestSmoothRectify:
    def test_identity_smoothing(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 3))
        s = FilterBank(Tensor(np.ones((3, 1))), 1)
        m = smooth_rectify(grid(x), s)
        np.testing.assert_allclose(m.values.data, np.logaddexp(0, np.abs(x)), atol=1e-12)

    def test_constant_input_steady_state(self):
        c = 0.7
        x = np.full((12, 2), c)
        s = FilterBank(Tensor(np.full((2, 5), 0.2)), 1)
        m = smooth_rectify(grid(x), s)
        # steady state (frames >= 4): moving average of the constant is c
        np.testing.assert_allclose(m.values.data[4:], np.logaddexp(0, c), atol=1e-12)

    def test_matches_causal_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((9, 4))
        ls = 5
        s = FilterBank(Tensor(np.full((4, ls), 1.0 / ls)), 1)
        got = smooth_rectify(grid(x), s).values.data
        expected = np.zeros_like(x)
        for n in range(9):
            for k in range(4):
                acc = 0.0
                for i in range(ls):
                    if n - i >= 0:
                        acc += abs(x[n - i, k]) / ls
                expected[n, k] = np.logaddexp(0, acc)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_strictly_positive(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((20, 6)) * 3
        s = FilterBank(Tensor(np.full((6, 5), 0.2)), 1)
        assert np.all(smooth_rectify(grid(x), s).values.data > 0)

    def test_gradient_through_taps(self):
        rng = np.random.default_rng(6)
        x = grid(rng.standard_normal((8, 3)))
        taps = Tensor(rng.uniform(0.1, 0.3, (3, 4)), requires_grad=True)
        s = FilterBank(taps, 1)
        report = ad.grad_check(
            lambda: ad.reduce_sum(ad.square(smooth_rectify(x, s).values)), [taps]
        )
        assert report.ok


class TestCarrier:
    def test_equal_grids_give_ones(self):
        m = np.abs(np.random.default_rng(7).standard_normal((5, 3))) + 0.5
        c = carrier(grid(m), grid(m, "modulation"))
        np.testing.assert_allclose(c.values.data, 1.0, atol=1e-7)

    def test_recombination_bound(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((10, 6))
        m = np.logaddexp(0, np.abs(x))  # realistic modulation scale
        c = carrier(grid(x), grid(m, "modulation"))
        err = np.max(np.abs(m * c.values.data - x))
        assert err < 1e-7

    def test_zero_raw_gives_zero_carrier(self):
        m = np.full((4, 2), 0.69)
        c = carrier(grid(np.zeros((4, 2))), grid(m, "modulation"))
        np.testing.assert_allclose(c.values.data, 0.0)


class TestSynthesize:
    @pytest.mark.parametrize("stride", [2, 4, 8, 16, 32, 64, 128, 256, 512])
    def test_roundtrip_all_strides(self, stride):
        rng = np.random.default_rng(stride)
        n = 1024
        x = rng.standard_normal(4096)
        fb = build_fourier_filterbank(n, stride)
        y = synthesize(analyze(Waveform(x, 16000), fb), fb).data
        a, b = n // 2, len(y) - n // 2
        err = np.linalg.norm(y[a:b] - x[a:b]) / np.linalg.norm(x[a:b])
        assert err < 1e-6

    def test_half_window_hop_classic_cola(self):
        rng = np.random.default_rng(99)
        x = rng.standard_normal(16000)
        fb = build_fourier_filterbank(1024, 512)
        y = synthesize(analyze(Waveform(x, 16000), fb), fb).data
        a, b = 512, len(y) - 512
        err = np.linalg.norm(y[a:b] - x[a:b]) / np.linalg.norm(x[a:b])
        assert err < 1e-6

    def test_zero_grid_zero_waveform(self):
        fb = build_fourier_filterbank(16, 4)
        out = synthesize(grid(np.zeros((5, 32))), fb)
        np.testing.assert_allclose(out.data, 0.0)

    def test_channel_mismatch(self):
        fb = build_fourier_filterbank(16, 4)
        with pytest.raises(ConfigError):
            synthesize(grid(np.zeros((5, 7))), fb)

    def test_trainable_kind_applies_no_normalizer(self):
        rng = np.random.default_rng(10)
        taps = rng.standard_normal((4, 8))
        fb = FilterBank(Tensor(taps), 4, kind=dsp.TRAINABLE)
        g = rng.standard_normal((3, 4))
        got = synthesize(grid(g), fb).data
        expected = ad.transposed_conv1d(Tensor(g), Tensor(taps), 4).data
        np.testing.assert_array_equal(got, expected)


class TestDumps:
    def test_raw_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        mat = rng.standard_normal((7, 5))
        path = tmp_path / "grid.f64"
        dsp.dump_matrix_raw(path, mat)
        np.testing.assert_array_equal(dsp.load_matrix_raw(path), mat)

    def test_raw_bad_magic(self, tmp_path):
        path = tmp_path / "bad.f64"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(AudioFormatError):
            dsp.load_matrix_raw(path)

    def test_csv_frames_as_rows(self, tmp_path):
        mat = np.array([[1.5, 2.0], [3.0, 4.25]])
        path = tmp_path / "grid.csv"
        dsp.dump_matrix_csv(path, mat)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        np.testing.assert_allclose([float(v) for v in lines[0].split(",")], mat[0])
