"""
Acoustic front end.
WAV PCM16 I/O, pre-emphasis, half-window framing, Hamming power spectra,
HTK-style mel filter banks, MFCCs (orthonormal DCT-II, c0 kept),
per-utterance normalization over time and context stacking.
"""

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import scipy.fft
from scipy.io import wavfile
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

CORPUS_SAMPLE_RATE = 44100
LOG_EPSILON = 1e-10
_PCM16_SCALE = 32768.0
_DEGENERATE_STD = 1e-12

CACHE_MAGIC = b"DAVF"
CACHE_VERSION = 1


# ── Errors ───────────────────────────────────────────────────────

class WavFormatError(DataError, ValueError):
    """RIFF/WAVE header missing or malformed."""


class UnsupportedCodecError(DataError, ValueError):
    """Readable WAV, but not 16-bit integer PCM."""


class EmptyAudioError(DataError, ValueError):
    """WAV with a zero-length data chunk."""


class SignalTooShortError(DataError, ValueError):
    pass


class MelResolutionError(ConfigError, ValueError):
    """Some mel filter covers no FFT bin."""


class SingleFrameError(DataError, ValueError):
    pass


class ContextError(ConfigError, ValueError):
    pass


# ── Domain types ─────────────────────────────────────────────────

class Device(str, Enum):
    SOURCE = "source"
    TARGET = "target"

    @property
    def index(self) -> int:
        return 0 if self is Device.SOURCE else 1


class Label(str, Enum):
    PATHOLOGICAL = "pathological"
    CONTROL = "control"

    @property
    def index(self) -> int:
        # class 1 is the positive (pathological) class everywhere
        return 1 if self is Label.PATHOLOGICAL else 0


class FeatureKind(str, Enum):
    MFCC = "mfcc"
    FBANK = "fbank"


@dataclass(frozen=True, eq=False)
class Utterance:
    samples: np.ndarray
    sample_rate: int
    device: Device
    label: Label | None = None
    id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise EmptyAudioError(f"utterance {self.id!r} has no samples")
        if self.sample_rate <= 0:
            raise DataError(f"utterance {self.id!r}: sample rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise DataError(f"utterance {self.id!r} contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


class FeatureConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: FeatureKind = FeatureKind.FBANK
    window_ms: float = Field(32.0, gt=0)
    normalized: bool = False
    n_mel_filters: int = Field(40, ge=1)
    n_cepstra: int = Field(26, ge=1)
    pre_emphasis: float = Field(0.97, ge=0.0, lt=1.0)
    context: int = Field(11, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.n_cepstra > self.n_mel_filters:
            raise ValueError("n_cepstra must not exceed n_mel_filters")
        if self.context % 2 == 0:
            raise ValueError("context must be odd")
        return self

    def window_len(self, sample_rate: int) -> int:
        """Window length in samples, rounded half-up."""
        return int(math.floor(self.window_ms * sample_rate / 1000.0 + 0.5))

    def frame_shift(self, sample_rate: int) -> int:
        """Half the window length (floor)."""
        return self.window_len(sample_rate) // 2

    def fft_size(self, sample_rate: int) -> int:
        return fft_size_for(self.window_len(sample_rate))

    @property
    def base_dims(self) -> int:
        return self.n_cepstra if self.kind is FeatureKind.MFCC else self.n_mel_filters

    @property
    def stacked_dims(self) -> int:
        return self.base_dims * self.context

    def label(self) -> str:
        norm = "norm" if self.normalized else "raw"
        return f"{self.kind.value}-{norm}-{self.window_ms:g}ms"

    def cache_key(self) -> str:
        """Readable label plus a digest of every field; names the feature cache directory."""
        fields = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return f"{self.label()}-{hashlib.sha1(fields.encode()).hexdigest()[:10]}"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    data: np.ndarray
    config: FeatureConfig
    utterance_id: str = ""
    context: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DataError("feature matrix must be frames x dims")
        if not np.all(np.isfinite(data)):
            raise DataError(f"non-finite features for {self.utterance_id!r}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


# ── WAV I/O ──────────────────────────────────────────────────────

def read_wav(path: str, device: Device = Device.SOURCE, label: Label | None = None,
             utterance_id: str | None = None) -> Utterance:
    """Read a PCM16 WAV file; stereo is averaged to mono, samples scaled by 1/32768."""
    with open(path, "rb") as f:
        head = f.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    try:
        sample_rate, data = wavfile.read(path)
    except ValueError as e:
        msg = str(e).lower()
        if "format" in msg or "bit depth" in msg or "compress" in msg:
            raise UnsupportedCodecError(f"{path}: {e}") from e
        raise WavFormatError(f"{path}: {e}") from e

    if data.dtype != np.int16:
        raise UnsupportedCodecError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.size == 0:
        raise EmptyAudioError(f"{path}: zero-length audio payload")

    samples = data.astype(np.float64)
    if samples.ndim == 2:
        logger.warning("%s: %d channels averaged to mono.", path, samples.shape[1])
        samples = samples.mean(axis=1)
    samples /= _PCM16_SCALE

    if sample_rate != CORPUS_SAMPLE_RATE:
        logger.warning("%s: sample rate %d Hz differs from the corpus rate %d Hz.",
                       path, sample_rate, CORPUS_SAMPLE_RATE)

    return Utterance(
        samples=samples,
        sample_rate=int(sample_rate),
        device=device,
        label=label,
        id=utterance_id if utterance_id is not None else path,
    )


def write_wav(path: str, utterance: Utterance) -> None:
    """Write mono PCM16; values outside [-1, 1) are clipped."""
    pcm = np.clip(np.round(utterance.samples * _PCM16_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, utterance.sample_rate, pcm)


# ── Front-end stages ─────────────────────────────────────────────

def pre_emphasize(signal: np.ndarray, coeff: float) -> np.ndarray:
    """y[0] = x[0]; y[n] = x[n] - coeff * x[n-1]."""
    if not 0.0 <= coeff < 1.0:
        raise ConfigError(f"pre-emphasis coefficient {coeff} outside [0, 1)")
    x = np.asarray(signal, dtype=np.float64)
    y = np.empty_like(x)
    y[:1] = x[:1]
    y[1:] = x[1:] - coeff * x[:-1]
    return y


def fft_size_for(window_len: int) -> int:
    """Smallest power of two >= window_len."""
    return 1 << max(0, int(window_len) - 1).bit_length()


def frame_starts(n_samples: int, window_len: int, shift: int) -> np.ndarray:
    """Start index of every frame, including a zero-padded tail frame if needed."""
    if n_samples < window_len:
        raise SignalTooShortError(
            f"signal of {n_samples} samples is shorter than one window ({window_len})"
        )
    n_full = (n_samples - window_len) // shift + 1
    starts = np.arange(n_full) * shift
    if starts[-1] + window_len < n_samples:
        starts = np.append(starts, starts[-1] + shift)
    return starts


def frame_signal(signal: np.ndarray, config: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Split into overlapping frames (frames x window_len), shift = window_len // 2."""
    x = np.asarray(signal, dtype=np.float64)
    window_len = config.window_len(sample_rate)
    shift = max(1, window_len // 2)
    starts = frame_starts(x.size, window_len, shift)

    padded_len = starts[-1] + window_len
    if padded_len > x.size:
        x = np.concatenate([x, np.zeros(padded_len - x.size)])
    index = starts[:, None] + np.arange(window_len)[None, :]
    return x[index]


def power_spectra(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """Hamming-windowed one-sided |DFT|^2 / fft_size for each row."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] > fft_size:
        raise ConfigError(f"frame length {frames.shape[1]} exceeds FFT size {fft_size}")
    windowed = frames * np.hamming(frames.shape[1])
    spectrum = np.fft.rfft(windowed, n=fft_size, axis=1)
    return (spectrum.real ** 2 + spectrum.imag ** 2) / fft_size


def power_spectrum(frame: np.ndarray, fft_size: int) -> np.ndarray:
    return power_spectra(np.asarray(frame)[None, :], fft_size)[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_filters: int, sample_rate: int) -> np.ndarray:
    """n_filters + 2 points equally spaced on the mel scale from 0 Hz to Nyquist."""
    mel_points = np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_filters + 2)
    return mel_to_hz(mel_points)


def mel_filter_centers(n_filters: int, sample_rate: int) -> np.ndarray:
    return mel_band_edges(n_filters, sample_rate)[1:-1]


def mel_filterbank_matrix(n_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (n_filters x fft_size/2+1), each row scaled to peak 1."""
    if n_filters < 1:
        raise ConfigError("need at least one mel filter")
    edges = mel_band_edges(n_filters, sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size

    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))

    peaks = bank.max(axis=1)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise MelResolutionError(
            f"{empty.size} of {n_filters} mel filters are empty at FFT size {fft_size}; "
            "use fewer filters or a longer window"
        )
    return bank / peaks[:, None]


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """First n_out rows of the orthonormal DCT-II matrix of size n_in."""
    return scipy.fft.dct(np.eye(n_in), type=2, norm="ortho", axis=0)[:n_out]


def _log_mel_energies(utterance: Utterance, config: FeatureConfig) -> np.ndarray:
    sr = utterance.sample_rate
    emphasized = pre_emphasize(utterance.samples, config.pre_emphasis)
    frames = frame_signal(emphasized, config, sr)
    fft_size = config.fft_size(sr)
    spectra = power_spectra(frames, fft_size)
    bank = mel_filterbank_matrix(config.n_mel_filters, fft_size, sr)
    return np.log(spectra @ bank.T + LOG_EPSILON)


def log_filterbank_features(utterance: Utterance, config: FeatureConfig) -> FeatureMatrix:
    if config.kind is not FeatureKind.FBANK:
        raise ConfigError("log_filterbank_features needs a filter-bank config")
    return FeatureMatrix(_log_mel_energies(utterance, config), config, utterance.id)


def mfcc_features(utterance: Utterance, config: FeatureConfig) -> FeatureMatrix:
    if config.kind is not FeatureKind.MFCC:
        raise ConfigError("mfcc_features needs an MFCC config")
    log_mel = _log_mel_energies(utterance, config)
    basis = dct_matrix(config.n_cepstra, config.n_mel_filters)
    return FeatureMatrix(log_mel @ basis.T, config, utterance.id)


def normalize_over_time(features: FeatureMatrix) -> FeatureMatrix:
    """Zero mean / unit std per dimension across this utterance's frames."""
    if features.frames < 2:
        raise SingleFrameError(f"cannot normalize {features.utterance_id!r}: single frame")
    data = features.data
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    scale = np.where(std < _DEGENERATE_STD, 1.0, std)
    return replace(features, data=(data - mean) / scale)


def stack_context(features: FeatureMatrix, context: int) -> FeatureMatrix:
    """Row t becomes frames t-k..t+k concatenated (k = context // 2), edges replicated."""
    if context < 1 or context % 2 == 0:
        raise ContextError(f"context must be odd and >= 1, got {context}")
    if context == 1:
        return features
    half = context // 2
    padded = np.pad(features.data, ((half, half), (0, 0)), mode="edge")
    n = features.frames
    stacked = np.concatenate([padded[i:i + n] for i in range(context)], axis=1)
    return replace(features, data=stacked, context=features.context * context)


def extract_features(utterance: Utterance, config: FeatureConfig, stack: bool = True) -> FeatureMatrix:
    """Full front end: base features, optional normalization, optional context stacking."""
    if config.kind is FeatureKind.MFCC:
        features = mfcc_features(utterance, config)
    else:
        features = log_filterbank_features(utterance, config)
    if config.normalized:
        features = normalize_over_time(features)
    if stack:
        features = stack_context(features, config.context)
    return features


# ── Feature cache ────────────────────────────────────────────────

def save_feature_cache(path: str, features: FeatureMatrix) -> None:
    """DAVF: magic, version u32, dims u32, frames u32, row-major float64 LE. Written via a temp file and os.replace."""
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, features.dims, features.frames)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(features.data, dtype="<f8").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def load_feature_cache(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not a DAVF feature cache")
    version, dims, frames = struct.unpack("<III", blob[4:16])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    expected = 16 + 8 * dims * frames
    if len(blob) != expected:
        raise DataError(f"{path}: truncated cache ({len(blob)} of {expected} bytes)")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(frames, dims).astype(np.float64)
