"""Corpus ingestion, 0 dB two-speaker mixture construction, and a
deterministic synthetic toy corpus for corpus-free desk-scale runs.

Corpus layout on disk: ``root/<speaker-id>/*.wav`` plus a
``manifest.json`` at the root listing the speaker-to-file mapping, the
train/test speaker split, the target/interference group of each speaker,
and the sample rate.  Train and test speaker sets are disjoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform
from .errors import AudioFormatError, ConfigError

MIX_REFERENCE_RMS = 0.05  # per-snippet RMS before summing; leaves headroom
UTTERANCE_SECONDS = 4.0

TARGET_GROUP = "target"
INTERFERENCE_GROUP = "interference"


def load_wav(path) -> Waveform:
    """Read a PCM16/PCM32 or IEEE float WAV as mono float64 in [-1, 1]."""
    try:
        rate, raw = wavfile.read(path)
    except Exception as exc:
        raise AudioFormatError(f"cannot read {path!s}: {exc}") from exc
    if raw.dtype == np.int16:
        data = raw.astype(np.float64) / 32768.0
    elif raw.dtype == np.int32:
        data = raw.astype(np.float64) / 2147483648.0
    elif raw.dtype in (np.float32, np.float64):
        data = raw.astype(np.float64)
    else:
        raise AudioFormatError(f"unsupported WAV sample format {raw.dtype} in {path!s}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(samples=data, sample_rate=int(rate))


def save_wav(path, wave: Waveform, subtype: str = "float32"):
    """Write mono WAV; float32 round-trips sample-exactly, pcm16 to 1 LSB."""
    if subtype == "float32":
        wavfile.write(path, wave.sample_rate, wave.samples.astype(np.float32))
    elif subtype == "pcm16":
        scaled = np.clip(np.round(wave.samples * 32768.0), -32768, 32767)
        wavfile.write(path, wave.sample_rate, scaled.astype(np.int16))
    else:
        raise ConfigError(f"unsupported WAV subtype {subtype!r}")


@dataclass
class SpeakerCorpus:
    root: Path
    speakers: dict[str, list[Path]]
    sample_rate: int
    train_speakers: set[str] = field(default_factory=set)
    test_speakers: set[str] = field(default_factory=set)
    groups: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        overlap = self.train_speakers & self.test_speakers
        if overlap:
            raise ConfigError(f"train/test speaker sets overlap: {sorted(overlap)}")

    def split_speakers(self, split: str, group: str) -> list[str]:
        pool = self.train_speakers if split == "train" else self.test_speakers
        return sorted(s for s in pool if self.groups.get(s) == group)


def write_manifest(corpus: SpeakerCorpus, path=None):
    path = Path(path) if path is not None else corpus.root / "manifest.json"
    payload = {
        "sample_rate": corpus.sample_rate,
        "speakers": {
            spk: [str(p.relative_to(corpus.root)) for p in files]
            for spk, files in sorted(corpus.speakers.items())
        },
        "train": sorted(corpus.train_speakers),
        "test": sorted(corpus.test_speakers),
        "groups": dict(sorted(corpus.groups.items())),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(root) -> SpeakerCorpus:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"no manifest.json under {root!s}")
    with open(manifest) as fh:
        payload = json.load(fh)
    speakers = {
        spk: [root / rel for rel in files]
        for spk, files in payload["speakers"].items()
    }
    return SpeakerCorpus(
        root=root,
        speakers=speakers,
        sample_rate=int(payload["sample_rate"]),
        train_speakers=set(payload.get("train", [])),
        test_speakers=set(payload.get("test", [])),
        groups=dict(payload.get("groups", {})),
    )


@dataclass(frozen=True)
class ToySpeakerProfile:
    speaker_id: str
    pitch_lo: float
    pitch_hi: float
    resonances: tuple[float, ...]
    resonance_width: float
    noise_ratio: float
    seed: int


@dataclass
class MixtureExample:
    mixture: Waveform
    target: Waveform
    interference: Waveform
    provenance: dict = field(default_factory=dict)


def _toy_profiles(n_per_class: int, sample_rate: int, seed: int):
    """Disjoint per-speaker pitch subranges inside each class band.

    Class A (interference) is low-pitched, class B (target) high-pitched;
    the class bands themselves do not touch, so every pair of profiles
    has disjoint pitch ranges.
    """
    rng = np.random.default_rng(seed)
    profiles = []
    for cls, (lo, hi), res_band in (
        ("a", (80.0, 160.0), (200.0, 900.0)),
        ("b", (180.0, 300.0), (900.0, 2800.0)),
    ):
        edges = np.linspace(lo, hi, n_per_class + 1)
        for i in range(n_per_class):
            centers = tuple(sorted(rng.uniform(*res_band, size=2)))
            profiles.append(
                ToySpeakerProfile(
                    speaker_id=f"{cls}{i:02d}",
                    pitch_lo=float(edges[i]),
                    pitch_hi=float(edges[i + 1]),
                    resonances=centers,
                    resonance_width=float(rng.uniform(120.0, 260.0)),
                    noise_ratio=float(rng.uniform(0.02, 0.05)),
                    seed=int(rng.integers(0, 2**31)),
                )
            )
    return profiles


def _toy_utterance(profile: ToySpeakerProfile, duration_s: float, sample_rate: int,
                   utterance_seed: int) -> np.ndarray:
    """Harmonic-plus-noise utterance with vibrato, syllabic amplitude
    modulation, and speaker-specific resonance shaping."""
    rng = np.random.default_rng((profile.seed, utterance_seed))
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(profile.pitch_lo, profile.pitch_hi)
    vibrato = 1.0 + 0.02 * np.sin(2.0 * np.pi * rng.uniform(4.0, 6.5) * t + rng.uniform(0, 2 * np.pi))
    inst_freq = f0 * vibrato
    phase_base = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate

    n_harm = min(24, int(0.45 * sample_rate / f0))
    sig = np.zeros(n)
    for k in range(1, n_harm + 1):
        freq = k * f0
        resonance = sum(
            math.exp(-((freq - c) ** 2) / (2.0 * profile.resonance_width**2))
            for c in profile.resonances
        )
        # fundamental kept dominant so class spectra have disjoint f0 peaks
        gain = k ** -1.0 * (0.25 + resonance) * (2.5 if k == 1 else 1.0)
        sig += gain * np.sin(k * phase_base + rng.uniform(0, 2 * np.pi))

    syllable = 0.6 + 0.4 * np.sin(2.0 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    sig *= syllable
    sig += profile.noise_ratio * np.std(sig) * rng.standard_normal(n)

    rms = np.sqrt(np.mean(sig**2))
    sig *= 0.1 / rms
    peak = np.max(np.abs(sig))
    if peak >= 0.99:
        sig *= 0.99 / peak
    return sig


def synth_toy_corpus(out_dir, n_speakers_per_class=3, minutes=6.0, seed=0,
                     sample_rate=16000) -> SpeakerCorpus:
    """Generate a two-class harmonic toy corpus under ``out_dir``.

    Utterances of UTTERANCE_SECONDS are distributed round-robin over all
    speakers until the requested total duration is reached.  Speakers are
    split ~70/30 into train/test per class (at least one test speaker per
    class when there are two or more).  Deterministic under (seed, args).
    """
    if minutes <= 0:
        raise ConfigError("minutes must be positive")
    out_dir = Path(out_dir)
    profiles = _toy_profiles(n_speakers_per_class, sample_rate, seed)
    n_utts = max(len(profiles), int(round(minutes * 60.0 / UTTERANCE_SECONDS)))

    speakers: dict[str, list[Path]] = {p.speaker_id: [] for p in profiles}
    for u in range(n_utts):
        profile = profiles[u % len(profiles)]
        spk_dir = out_dir / profile.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        samples = _toy_utterance(profile, UTTERANCE_SECONDS, sample_rate, utterance_seed=u)
        path = spk_dir / f"utt{u:04d}.wav"
        save_wav(path, Waveform(samples, sample_rate), subtype="float32")
        speakers[profile.speaker_id].append(path)

    train, test = set(), set()
    for cls in ("a", "b"):
        ids = sorted(s for s in speakers if s.startswith(cls))
        n_test = max(1, round(0.3 * len(ids))) if len(ids) >= 2 else 0
        test.update(ids[len(ids) - n_test :])
        train.update(ids[: len(ids) - n_test])

    corpus = SpeakerCorpus(
        root=out_dir,
        speakers=speakers,
        sample_rate=sample_rate,
        train_speakers=train,
        test_speakers=test,
        groups={s: (TARGET_GROUP if s.startswith("b") else INTERFERENCE_GROUP)
                for s in speakers},
    )
    write_manifest(corpus)
    return corpus


@lru_cache(maxsize=512)
def _cached_load(path: str) -> Waveform:
    # reused across epochs; snippets copy before scaling, so sharing is safe
    return load_wav(path)


def _rms_normalize(snippet: np.ndarray, level: float = MIX_REFERENCE_RMS) -> np.ndarray:
    rms = np.sqrt(np.mean(snippet**2))
    if rms <= 0:
        raise ConfigError("cannot normalize a silent snippet")
    return snippet * (level / rms)


def snip_and_mix(target: Waveform, interference: Waveform, *, target_offset=0,
                 interf_offset=0, dur_s=None, provenance=None) -> MixtureExample:
    """Cut aligned snippets, normalize each to the reference RMS (0 dB),
    and sum; the mixture is exactly target + interference."""
    fs = target.sample_rate
    if interference.sample_rate != fs:
        raise ConfigError("sample-rate mismatch between sources")
    n = int(round(dur_s * fs)) if dur_s is not None else min(len(target), len(interference))
    y = _rms_normalize(target.samples[target_offset : target_offset + n])
    z = _rms_normalize(interference.samples[interf_offset : interf_offset + n])
    if len(y) != n or len(z) != n:
        raise ConfigError("snippet runs past the end of an utterance")
    mix = y + z
    if np.max(np.abs(mix)) >= 1.0:
        raise ConfigError("mixture clipped; reference RMS leaves insufficient headroom")
    return MixtureExample(
        mixture=Waveform(mix, fs),
        target=Waveform(y, fs),
        interference=Waveform(z, fs),
        provenance=provenance or {},
    )


def make_mixture(corpus: SpeakerCorpus, target_spk: str, interf_spk: str,
                 dur_s: float = 2.0, seed: int = 0) -> MixtureExample:
    """Draw a random snippet from a random utterance of each speaker and
    mix at 0 dB; deterministic under the seed."""
    rng = np.random.default_rng(seed)
    n = int(round(dur_s * corpus.sample_rate))

    def pick(spk):
        files = [p for p in corpus.speakers[spk]]
        rng.shuffle(files)
        for path in files:
            wave = _cached_load(str(path))
            if len(wave) >= n:
                offset = int(rng.integers(0, len(wave) - n + 1))
                return path, offset, wave
        raise ConfigError(f"speaker {spk} has no utterance of at least {dur_s} s")

    t_path, t_off, t_wave = pick(target_spk)
    i_path, i_off, i_wave = pick(interf_spk)
    return snip_and_mix(
        t_wave, i_wave, target_offset=t_off, interf_offset=i_off, dur_s=dur_s,
        provenance={
            "seed": seed,
            "target_speaker": target_spk,
            "interference_speaker": interf_spk,
            "target_file": str(t_path),
            "target_offset": t_off,
            "interference_file": str(i_path),
            "interference_offset": i_off,
        },
    )


def dataset_examples(corpus: SpeakerCorpus, minutes: float, seed: int, *,
                     dur_s: float = 2.0, split: str = "train"):
    """The deterministic example sequence for one epoch.

    Speaker pairs and snippets are sampled with replacement; the count is
    ceil(minutes * 60 / dur_s).
    """
    targets = corpus.split_speakers(split, TARGET_GROUP)
    interfs = corpus.split_speakers(split, INTERFERENCE_GROUP)
    if not targets or not interfs:
        raise ConfigError(f"corpus has no usable {split} speaker pair")
    n_examples = math.ceil(minutes * 60.0 / dur_s)
    rng = np.random.default_rng(seed)
    for i in range(n_examples):
        t_spk = targets[rng.integers(0, len(targets))]
        i_spk = interfs[rng.integers(0, len(interfs))]
        yield make_mixture(corpus, t_spk, i_spk, dur_s=dur_s,
                           seed=int(rng.integers(0, 2**31)))


def dataset_iter(corpus: SpeakerCorpus, minutes: float, batch_size: int, seed: int, *,
                 dur_s: float = 2.0, split: str = "train"):
    """Yield ceil(minutes*60/dur_s / batch_size) batches per epoch."""
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    batch = []
    for example in dataset_examples(corpus, minutes, seed, dur_s=dur_s, split=split):
        batch.append(example)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
