import numpy as np
import pytest

from wavesep import data
from wavesep.data import (
    MIX_REFERENCE_RMS,
    SpeakerCorpus,
    dataset_examples,
    dataset_iter,
    load_corpus,
    load_wav,
    make_mixture,
    save_wav,
    synth_toy_corpus,
)
from wavesep.dsp import Waveform
from wavesep.errors import AudioFormatError, ConfigError


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth_toy_corpus(root, n_speakers_per_class=2, minutes=2.0, seed=7,
                            sample_rate=16000)


class TestWavIO:
    def test_float32_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = rng.standard_normal(1000).astype(np.float32).astype(np.float64) * 0.1
        path = tmp_path / "f32.wav"
        save_wav(path, Waveform(samples, 16000))
        back = load_wav(path)
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(back.samples, samples.astype(np.float32))

    def test_pcm16_roundtrip_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(1)
        samples = rng.uniform(-0.9, 0.9, 500)
        path = tmp_path / "p16.wav"
        save_wav(path, Waveform(samples, 8000), subtype="pcm16")
        back = load_wav(path)
        assert np.max(np.abs(back.samples - samples)) <= 1.0 / 32768.0

    def test_stereo_averaged_to_mono(self, tmp_path):
        from scipy.io import wavfile

        left = np.linspace(-0.5, 0.5, 64).astype(np.float32)
        right = -left
        path = tmp_path / "stereo.wav"
        wavfile.write(path, 16000, np.stack([left, right], axis=1))
        back = load_wav(path)
        np.testing.assert_allclose(back.samples, (left + right) / 2.0, atol=1e-7)

    def test_malformed_file_rejected(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"this is not audio")
        with pytest.raises(AudioFormatError):
            load_wav(path)


class TestToyCorpus:
    def test_total_duration_bookkeeping(self, toy_corpus):
        n_files = sum(len(v) for v in toy_corpus.speakers.values())
        total_s = n_files * data.UTTERANCE_SECONDS
        assert abs(total_s - 2.0 * 60.0) <= data.UTTERANCE_SECONDS

    def test_layout_and_manifest(self, toy_corpus):
        assert (toy_corpus.root / "manifest.json").exists()
        loaded = load_corpus(toy_corpus.root)
        assert loaded.speakers.keys() == toy_corpus.speakers.keys()
        assert loaded.train_speakers == toy_corpus.train_speakers
        assert loaded.test_speakers == toy_corpus.test_speakers
        for spk, files in loaded.speakers.items():
            assert all(p.parent.name == spk for p in files)

    def test_split_disjoint_and_both_classes_present(self, toy_corpus):
        assert not (toy_corpus.train_speakers & toy_corpus.test_speakers)
        for split in ("train", "test"):
            assert toy_corpus.split_speakers(split, data.TARGET_GROUP)
            assert toy_corpus.split_speakers(split, data.INTERFERENCE_GROUP)

    def test_class_spectra_have_disjoint_fundamental_peaks(self, toy_corpus):
        # DFT peak of each class's long-term spectrum stays in its pitch band
        def fundamental(spk):
            sig = np.concatenate(
                [load_wav(p).samples for p in toy_corpus.speakers[spk][:2]]
            )
            spec = np.abs(np.fft.rfft(sig))
            freqs = np.fft.rfftfreq(len(sig), 1.0 / toy_corpus.sample_rate)
            live = freqs >= 40.0
            return freqs[live][np.argmax(spec[live])]

        for spk in toy_corpus.speakers:
            f0 = fundamental(spk)
            if spk.startswith("a"):
                assert 40.0 <= f0 < 170.0, (spk, f0)
            else:
                assert 170.0 <= f0 <= 320.0, (spk, f0)

    def test_same_seed_identical_corpus(self, tmp_path):
        a = synth_toy_corpus(tmp_path / "a", n_speakers_per_class=2, minutes=0.5, seed=3)
        b = synth_toy_corpus(tmp_path / "b", n_speakers_per_class=2, minutes=0.5, seed=3)
        for spk in a.speakers:
            for pa, pb in zip(a.speakers[spk], b.speakers[spk]):
                np.testing.assert_array_equal(load_wav(pa).samples, load_wav(pb).samples)

    def test_amplitude_in_range(self, toy_corpus):
        for files in toy_corpus.speakers.values():
            w = load_wav(files[0])
            assert np.max(np.abs(w.samples)) < 1.0


class TestMixtures:
    def test_snippet_length(self, toy_corpus):
        ex = make_mixture(toy_corpus, "b00", "a00", dur_s=2.0, seed=1)
        assert len(ex.mixture) == 32000

    def test_zero_db_construction(self, toy_corpus):
        ex = make_mixture(toy_corpus, "b00", "a00", dur_s=2.0, seed=2)
        rms_t = np.sqrt(np.mean(ex.target.samples**2))
        rms_i = np.sqrt(np.mean(ex.interference.samples**2))
        assert rms_t / rms_i == pytest.approx(1.0, abs=1e-9)
        assert rms_t == pytest.approx(MIX_REFERENCE_RMS, abs=1e-12)

    def test_mixture_is_exact_sum(self, toy_corpus):
        ex = make_mixture(toy_corpus, "b01", "a01", dur_s=1.0, seed=3)
        np.testing.assert_array_equal(
            ex.mixture.samples, ex.target.samples + ex.interference.samples
        )

    def test_headroom(self, toy_corpus):
        ex = make_mixture(toy_corpus, "b00", "a01", dur_s=2.0, seed=4)
        assert np.max(np.abs(ex.mixture.samples)) < 1.0

    def test_deterministic_under_seed(self, toy_corpus):
        a = make_mixture(toy_corpus, "b00", "a00", dur_s=1.0, seed=5)
        b = make_mixture(toy_corpus, "b00", "a00", dur_s=1.0, seed=5)
        np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
        assert a.provenance == b.provenance

    def test_too_long_snippet_rejected(self, toy_corpus):
        with pytest.raises(ConfigError):
            make_mixture(toy_corpus, "b00", "a00", dur_s=60.0, seed=6)


class TestDatasetIter:
    def test_batch_count(self, toy_corpus):
        batches = list(dataset_iter(toy_corpus, minutes=1.0, batch_size=5, seed=0))
        assert len(batches) == 6  # ceil(30 / 5)
        assert sum(len(b) for b in batches) == 30

    def test_uneven_final_batch(self, toy_corpus):
        batches = list(dataset_iter(toy_corpus, minutes=0.5, batch_size=4, seed=0,
                                    dur_s=2.0))
        assert len(batches) == 4  # ceil(15 / 4)
        assert len(batches[-1]) == 3

    def test_train_stream_avoids_test_speakers(self, toy_corpus):
        for ex in dataset_examples(toy_corpus, minutes=0.5, seed=1, split="train"):
            assert ex.provenance["target_speaker"] in toy_corpus.train_speakers
            assert ex.provenance["interference_speaker"] in toy_corpus.train_speakers

    def test_same_seed_identical_stream(self, toy_corpus):
        a = list(dataset_examples(toy_corpus, minutes=0.4, seed=2))
        b = list(dataset_examples(toy_corpus, minutes=0.4, seed=2))
        for ea, eb in zip(a, b):
            np.testing.assert_array_equal(ea.mixture.samples, eb.mixture.samples)

    def test_target_group_is_high_pitch_class(self, toy_corpus):
        ex = next(iter(dataset_examples(toy_corpus, minutes=0.1, seed=3)))
        assert ex.provenance["target_speaker"].startswith("b")
        assert ex.provenance["interference_speaker"].startswith("a")


class TestCorpusValidation:
    def test_overlapping_split_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            SpeakerCorpus(root=tmp_path, speakers={}, sample_rate=16000,
                          train_speakers={"x"}, test_speakers={"x"})

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            load_corpus(tmp_path)
