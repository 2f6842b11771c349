"""
Synthetic two-device vowel corpus.

Sustained /a/ vowels come from a source-filter synthesizer. The source is a
glottal impulse train with per-period jitter and shimmer, shaped to a -12
dB/octave roll-off, plus white aspiration noise at a given harmonics-to-noise
ratio. The filter is a cascade of Klatt formant resonators. Pathological
voices get more jitter and shimmer and a lower HNR than control voices.

Each recording device is simulated by an impulse response, a bandlimit, a
spectral tilt and a noise floor. Every random draw comes from a
SeedSequence keyed by (corpus seed, utterance index), so the output does not
depend on generation order.
"""

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import signal

from dsp import CORPUS_SAMPLE_RATE, Device, FeatureConfig, FeatureKind, Label, Utterance, \
    extract_features, write_wav
from errors import ConfigError, DataError
from metrics import linear_probe_accuracy

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.9
GLOTTAL_ROLLOFF_HZ = 100.0
TILT_REFERENCE_HZ = 1000.0
SUBSETS = ("source_train", "source_test", "target_adapt", "target_test")


class UnstableResonatorError(ConfigError, ValueError):
    pass


# ── specs ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VoiceSpec:
    f0: float
    jitter: float
    shimmer: float
    hnr_db: float
    formants: tuple[tuple[float, float], ...]
    duration_s: float
    label: Label

    def __post_init__(self):
        if self.f0 <= 0 or self.duration_s <= 0:
            raise ConfigError("f0 and duration must be positive")
        if self.jitter < 0 or self.shimmer < 0:
            raise ConfigError("jitter and shimmer must be non-negative")


@dataclass(frozen=True)
class DeviceProfile:
    name: Device
    spectral_tilt_db_per_octave: float = 0.0
    bandlimit_hz: float = math.inf
    noise_floor_db: float = -math.inf
    impulse_response: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        ir = np.asarray(self.impulse_response, dtype=np.float64)
        if ir.size == 0 or not np.all(np.isfinite(ir)):
            raise ConfigError(f"{self.name.value}: impulse response must be finite and non-empty")
        peak_gain = np.abs(np.fft.rfft(ir, n=max(4096, ir.size))).max()
        if peak_gain <= 0:
            raise ConfigError(f"{self.name.value}: impulse response has zero gain")
        object.__setattr__(self, "impulse_response", tuple(float(v) for v in ir / peak_gain))

    @classmethod
    def identity(cls, name: Device = Device.SOURCE) -> "DeviceProfile":
        return cls(name=name)


class Range(BaseModel):
    low: float
    high: float

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


class VoiceRanges(BaseModel):
    jitter: Range
    shimmer: Range
    hnr_db: Range


class ProfileSpec(BaseModel):
    spectral_tilt_db_per_octave: float = 0.0
    bandlimit_hz: float = math.inf
    noise_floor_db: float = -math.inf
    impulse_response: list[float] = Field(default_factory=lambda: [1.0])

    def build(self, name: Device) -> DeviceProfile:
        return DeviceProfile(name, self.spectral_tilt_db_per_octave, self.bandlimit_hz,
                             self.noise_floor_db, tuple(self.impulse_response))


# Voice-quality conventions: healthy jitter < 1 %, shimmer < 3-4 %, HNR > 20 dB.
CONTROL_RANGES = VoiceRanges(jitter=Range(low=0.0, high=0.005), shimmer=Range(low=0.0, high=0.03),
                             hnr_db=Range(low=20.0, high=30.0))
PATHOLOGICAL_RANGES = VoiceRanges(jitter=Range(low=0.02, high=0.05), shimmer=Range(low=0.06, high=0.15),
                                  hnr_db=Range(low=5.0, high=15.0))
# /a/ formants: (center low, center high, bandwidth low, bandwidth high)
A_FORMANTS = ((650.0, 850.0, 60.0, 120.0), (1050.0, 1350.0, 80.0, 140.0), (2400.0, 2900.0, 100.0, 180.0))


class CorpusSpec(BaseModel):
    source_pathological: int = Field(133, ge=1)
    source_control: int = Field(50, ge=1)
    target_pathological: int = Field(52, ge=1)
    target_control: int = Field(20, ge=1)
    source_test_fraction: float = Field(37 / 183, gt=0, lt=1)
    target_test_fraction: float = Field(0.5, gt=0, lt=1)
    duration_s: float = Field(0.5, gt=0)
    sample_rate: int = CORPUS_SAMPLE_RATE
    f0: Range = Range(low=90.0, high=250.0)
    control: VoiceRanges = CONTROL_RANGES
    pathological: VoiceRanges = PATHOLOGICAL_RANGES
    source_profile: ProfileSpec = ProfileSpec(bandlimit_hz=20000.0, noise_floor_db=-80.0)
    target_profile: ProfileSpec = ProfileSpec(
        spectral_tilt_db_per_octave=-4.0,
        bandlimit_hz=3400.0,
        noise_floor_db=-50.0,
        impulse_response=[1.0, 0.55, 0.3, 0.12],
    )

    @classmethod
    def for_scale(cls, scale: str) -> "CorpusSpec":
        if scale == "ci":
            return cls(source_pathological=10, source_control=10,
                       target_pathological=6, target_control=4)
        return cls()

    @property
    def total(self) -> int:
        return self.source_pathological + self.source_control + self.target_pathological + self.target_control


# ── synthesis ────────────────────────────────────────────────────

def _scaled_perturbation(rng: np.random.Generator, n: int, amount: float) -> np.ndarray:
    """Zero-mean sequence whose mean absolute consecutive difference equals amount."""
    raw = rng.standard_normal(n)
    raw -= raw.mean()
    spread = np.mean(np.abs(np.diff(raw))) if n > 1 else 0.0
    if amount <= 0 or spread <= 0:
        return np.zeros(n)
    return raw * (amount / spread)


def resonator_coefficients(center_hz: float, bandwidth_hz: float, sample_rate: int):
    """Klatt second-order resonator with unit DC gain: (b, a) for scipy.signal.lfilter."""
    if not 0 < center_hz < sample_rate / 2 or bandwidth_hz <= 0:
        raise UnstableResonatorError(
            f"resonator {center_hz:.1f} Hz / {bandwidth_hz:.1f} Hz invalid at {sample_rate} Hz"
        )
    c = -math.exp(-2.0 * math.pi * bandwidth_hz / sample_rate)
    b = 2.0 * math.exp(-math.pi * bandwidth_hz / sample_rate) * math.cos(2.0 * math.pi * center_hz / sample_rate)
    a = 1.0 - b - c
    return np.array([a]), np.array([1.0, -b, -c])


def glottal_onsets(spec: VoiceSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pulse onset times (s) and amplitudes after jitter and shimmer."""
    period = 1.0 / spec.f0
    n_periods = int(math.ceil(spec.duration_s * spec.f0)) + 2
    periods = period * np.maximum(0.5, 1.0 + _scaled_perturbation(rng, n_periods, spec.jitter))
    amplitudes = np.maximum(0.1, 1.0 + _scaled_perturbation(rng, n_periods, spec.shimmer))
    onsets = np.concatenate([[0.0], np.cumsum(periods)[:-1]])
    keep = onsets < spec.duration_s
    return onsets[keep], amplitudes[keep]


def synth_vowel(spec: VoiceSpec, seed: int, sample_rate: int = CORPUS_SAMPLE_RATE,
                device: Device = Device.SOURCE, utterance_id: str = "") -> Utterance:
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration_s * sample_rate))
    onsets, amplitudes = glottal_onsets(spec, rng)

    source = np.zeros(n)
    index = np.minimum(np.round(onsets * sample_rate).astype(int), n - 1)
    np.add.at(source, index, amplitudes)

    # two one-pole lowpasses give the -12 dB/octave glottal roll-off
    pole = math.exp(-2.0 * math.pi * GLOTTAL_ROLLOFF_HZ / sample_rate)
    for _ in range(2):
        source = signal.lfilter([1.0 - pole], [1.0, -pole], source)

    if math.isfinite(spec.hnr_db):
        harmonic_power = float(np.mean(source ** 2))
        noise_std = math.sqrt(harmonic_power / 10.0 ** (spec.hnr_db / 10.0))
        source = source + rng.normal(0.0, noise_std, n)

    out = source
    for center, bandwidth in spec.formants:
        b, a = resonator_coefficients(center, bandwidth, sample_rate)
        out = signal.lfilter(b, a, out)

    peak = np.max(np.abs(out))
    if peak > 0:
        out = out * (PEAK_LEVEL / peak)
    return Utterance(out, sample_rate, device, spec.label, utterance_id)


def measure_jitter(utterance: Utterance, f0: float) -> float:
    """Local jitter from pulse peaks: mean |period difference| / mean period."""
    periods = np.diff(_pulse_peaks(utterance, f0)[0])
    if periods.size < 2:
        raise DataError("too few pulses to measure jitter")
    return float(np.mean(np.abs(np.diff(periods))) / np.mean(periods))


def measure_shimmer(utterance: Utterance, f0: float) -> float:
    heights = _pulse_peaks(utterance, f0)[1]
    if heights.size < 2:
        raise DataError("too few pulses to measure shimmer")
    return float(np.mean(np.abs(np.diff(heights))) / np.mean(heights))


def _pulse_peaks(utterance: Utterance, f0: float):
    distance = max(1, int(0.7 * utterance.sample_rate / f0))
    peaks, props = signal.find_peaks(utterance.samples, distance=distance, height=0.0)
    return peaks.astype(np.float64), props["peak_heights"]


def apply_channel(utterance: Utterance, profile: DeviceProfile, seed: int) -> Utterance:
    """Impulse response, bandlimit, spectral tilt, then additive noise floor."""
    sr = utterance.sample_rate
    x = signal.lfilter(np.asarray(profile.impulse_response), [1.0], utterance.samples)

    if profile.bandlimit_hz < sr / 2:
        sos = signal.butter(6, profile.bandlimit_hz, btype="low", fs=sr, output="sos")
        x = signal.sosfilt(sos, x)

    if profile.spectral_tilt_db_per_octave != 0.0:
        spectrum = np.fft.rfft(x)
        freqs = np.maximum(np.fft.rfftfreq(x.size, 1.0 / sr), 50.0)
        gain_db = profile.spectral_tilt_db_per_octave * np.log2(freqs / TILT_REFERENCE_HZ)
        x = np.fft.irfft(spectrum * 10.0 ** (gain_db / 20.0), n=x.size)

    if math.isfinite(profile.noise_floor_db):
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, 10.0 ** (profile.noise_floor_db / 20.0), x.size)

    return Utterance(x, sr, profile.name, utterance.label, utterance.id)


# ── corpus ───────────────────────────────────────────────────────

@dataclass
class CorpusRecord:
    id: str
    subset: str
    voice: VoiceSpec
    clean: Utterance
    recorded: Utterance

    @property
    def path(self) -> str:
        return os.path.join("wav", f"{self.id}.wav")


@dataclass
class Corpus:
    spec: CorpusSpec
    seed: int
    records: list[CorpusRecord] = field(default_factory=list)
    manifest_path: str | None = None

    def manifest(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"id": r.id, "path": r.path, "device": r.recorded.device.value,
              "label": r.voice.label.value, "subset": r.subset} for r in self.records],
            columns=["id", "path", "device", "label", "subset"],
        )


def _seeds(corpus_seed: int, index: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([int(corpus_seed), index]).generate_state(count)]


def draw_voice(spec: CorpusSpec, label: Label, rng: np.random.Generator) -> VoiceSpec:
    ranges = spec.pathological if label is Label.PATHOLOGICAL else spec.control
    formants = tuple(
        (float(rng.uniform(lo, hi)), float(rng.uniform(b_lo, b_hi)))
        for lo, hi, b_lo, b_hi in A_FORMANTS
    )
    return VoiceSpec(
        f0=spec.f0.draw(rng),
        jitter=ranges.jitter.draw(rng),
        shimmer=ranges.shimmer.draw(rng),
        hnr_db=ranges.hnr_db.draw(rng),
        formants=formants,
        duration_s=spec.duration_s,
        label=label,
    )


def _assign_subsets(labels: list[Label], test_fraction: float, rng: np.random.Generator,
                    train_name: str, test_name: str) -> list[str]:
    """Stratified split: round(fraction * class count) test items per class."""
    subsets = [train_name] * len(labels)
    for label in (Label.PATHOLOGICAL, Label.CONTROL):
        members = [i for i, l in enumerate(labels) if l is label]
        n_test = int(round(test_fraction * len(members)))
        for i in rng.permutation(members)[:n_test]:
            subsets[int(i)] = test_name
    return subsets


def build_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Synthesize every utterance in memory (clean and through its device)."""
    profiles = {
        Device.SOURCE: spec.source_profile.build(Device.SOURCE),
        Device.TARGET: spec.target_profile.build(Device.TARGET),
    }
    layout = [
        (Device.SOURCE, "src", spec.source_pathological, spec.source_control,
         spec.source_test_fraction, ("source_train", "source_test")),
        (Device.TARGET, "tgt", spec.target_pathological, spec.target_control,
         spec.target_test_fraction, ("target_adapt", "target_test")),
    ]
    split_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_003]))

    corpus = Corpus(spec=spec, seed=seed)
    index = 0
    for device, prefix, n_path, n_ctrl, fraction, (train_name, test_name) in layout:
        labels = [Label.PATHOLOGICAL] * n_path + [Label.CONTROL] * n_ctrl
        subsets = _assign_subsets(labels, fraction, split_rng, train_name, test_name)
        counts = {Label.PATHOLOGICAL: 0, Label.CONTROL: 0}
        for label, subset in zip(labels, subsets):
            k = counts[label]
            counts[label] += 1
            voice_seed, synth_seed, channel_seed = _seeds(seed, index, 3)
            voice = draw_voice(spec, label, np.random.default_rng(voice_seed))
            utt_id = f"{prefix}-{'path' if label is Label.PATHOLOGICAL else 'ctrl'}-{k:03d}"
            clean = synth_vowel(voice, synth_seed, spec.sample_rate, device, utt_id)
            recorded = apply_channel(clean, profiles[device], channel_seed)
            corpus.records.append(CorpusRecord(utt_id, subset, voice, clean, recorded))
            index += 1

    logger.info("Synthesized %d utterances (%d source, %d target).", len(corpus.records),
                spec.source_pathological + spec.source_control,
                spec.target_pathological + spec.target_control)
    return corpus


def generate_corpus(spec: CorpusSpec, seed: int, out_dir: str) -> Corpus:
    """Write WAV files under out_dir/wav and the manifest CSV; returns the corpus."""
    corpus = build_corpus(spec, seed)
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    for record in corpus.records:
        write_wav(os.path.join(out_dir, record.path), record.recorded)

    manifest_path = os.path.join(out_dir, "manifest.csv")
    corpus.manifest().to_csv(manifest_path, index=False)
    corpus.manifest_path = manifest_path
    logger.info("Wrote %d WAV files and %s.", len(corpus.records), manifest_path)
    return corpus


def file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ── self-test ────────────────────────────────────────────────────

@dataclass
class SelfTestReport:
    device_probe_accuracy: float
    pathology_probe_accuracy: float
    device_threshold: float = 0.95
    pathology_threshold: float = 0.85

    @property
    def passed(self) -> bool:
        return (self.device_probe_accuracy > self.device_threshold
                and self.pathology_probe_accuracy > self.pathology_threshold)


_PROBE_FEATURES = FeatureConfig(kind=FeatureKind.FBANK, window_ms=32.0, normalized=False)


def utterance_statistics(utterance: Utterance, with_std: bool = False) -> np.ndarray:
    """Per-utterance mean (and optionally std) of unstacked log filter banks."""
    data = extract_features(utterance, _PROBE_FEATURES, stack=False).data
    if with_std:
        return np.concatenate([data.mean(axis=0), data.std(axis=0)])
    return data.mean(axis=0)


def self_test(corpus: Corpus) -> SelfTestReport:
    """Device separability of recorded audio and pathology separability of clean audio."""
    recorded = np.stack([utterance_statistics(r.recorded) for r in corpus.records])
    devices = np.array([r.recorded.device.index for r in corpus.records])
    clean = np.stack([utterance_statistics(r.clean, with_std=True) for r in corpus.records])
    labels = np.array([r.voice.label.index for r in corpus.records])

    report = SelfTestReport(
        device_probe_accuracy=linear_probe_accuracy(recorded, devices, corpus.seed),
        pathology_probe_accuracy=linear_probe_accuracy(clean, labels, corpus.seed),
    )
    logger.info("Corpus self-test: device probe %.3f, pathology probe %.3f (%s).",
                report.device_probe_accuracy, report.pathology_probe_accuracy,
                "pass" if report.passed else "FAIL")
    return report
