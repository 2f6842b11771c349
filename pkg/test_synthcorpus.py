"""Tests for the synthetic two-device corpus."""

import math
import os

import numpy as np
import pandas as pd
import pytest

from dsp import Device, Label, Utterance, read_wav
from errors import ConfigError
from synthcorpus import (
    SUBSETS, CorpusSpec, DeviceProfile, UnstableResonatorError, VoiceSpec, _scaled_perturbation,
    apply_channel, build_corpus, file_hash, generate_corpus, glottal_onsets, measure_jitter,
    measure_shimmer, resonator_coefficients, self_test, synth_vowel,
)

SR = 44100


def _voice(jitter=0.0, shimmer=0.0, hnr_db=math.inf, formants=(), f0=147.0, duration_s=1.0,
           label=Label.CONTROL):
    return VoiceSpec(f0=f0, jitter=jitter, shimmer=shimmer, hnr_db=hnr_db, formants=formants,
                     duration_s=duration_s, label=label)


# ── source ──

def test_perturbation_has_requested_size():
    rng = np.random.default_rng(0)
    seq = _scaled_perturbation(rng, 200, 0.03)
    assert abs(seq.mean()) < 1e-12
    assert np.mean(np.abs(np.diff(seq))) == pytest.approx(0.03)
    assert np.all(_scaled_perturbation(rng, 10, 0.0) == 0.0)


def test_onsets_carry_the_jitter():
    onsets, amplitudes = glottal_onsets(_voice(jitter=0.03, shimmer=0.1), np.random.default_rng(1))
    periods = np.diff(onsets)
    assert np.mean(np.abs(np.diff(periods))) / np.mean(periods) == pytest.approx(0.03, rel=0.1)
    assert np.mean(np.abs(np.diff(amplitudes))) / np.mean(amplitudes) == pytest.approx(0.1, rel=0.1)
    assert onsets[-1] < 1.0


def test_steady_voice_is_periodic_at_f0():
    utt = synth_vowel(_voice(formants=((750.0, 90.0), (1200.0, 110.0))), seed=0)
    x = utt.samples - utt.samples.mean()
    lags = np.arange(200, 400)
    autocorr = [np.dot(x[:-lag], x[lag:]) for lag in lags]
    assert abs(lags[int(np.argmax(autocorr))] - SR / 147.0) <= 1
    assert np.max(np.abs(utt.samples)) == pytest.approx(0.9)
    assert utt.samples.size == SR


def test_jitter_and_shimmer_are_measurable():
    steady = synth_vowel(_voice(), seed=3)
    rough = synth_vowel(_voice(jitter=0.03, shimmer=0.1), seed=3)
    assert measure_jitter(steady, 147.0) < 0.005
    assert measure_shimmer(steady, 147.0) < 0.01
    assert measure_jitter(rough, 147.0) == pytest.approx(0.03, rel=0.4)
    assert measure_shimmer(rough, 147.0) == pytest.approx(0.1, rel=0.4)


def test_synthesis_is_seeded():
    voice = _voice(jitter=0.02, shimmer=0.05, hnr_db=15.0, duration_s=0.2)
    np.testing.assert_array_equal(synth_vowel(voice, 5).samples, synth_vowel(voice, 5).samples)
    assert not np.array_equal(synth_vowel(voice, 5).samples, synth_vowel(voice, 6).samples)


def test_voice_spec_validation():
    with pytest.raises(ConfigError):
        _voice(jitter=-0.1)
    with pytest.raises(ConfigError):
        _voice(f0=0.0)


# ── filters ──

def test_resonator_has_unit_dc_gain():
    b, a = resonator_coefficients(700.0, 100.0, SR)
    assert b.sum() / a.sum() == pytest.approx(1.0)
    assert np.all(np.abs(np.roots(a)) < 1.0)


def test_resonator_above_nyquist():
    with pytest.raises(UnstableResonatorError):
        resonator_coefficients(30000.0, 100.0, SR)
    with pytest.raises(UnstableResonatorError):
        resonator_coefficients(700.0, 0.0, SR)


# ── channel ──

def _noise(seconds=1.0, seed=0):
    return Utterance(np.random.default_rng(seed).standard_normal(int(seconds * SR)) * 0.1, SR, Device.SOURCE,
                     Label.CONTROL, "noise")


def test_identity_channel_only_retags():
    utt = _noise()
    out = apply_channel(utt, DeviceProfile.identity(Device.TARGET), seed=0)
    np.testing.assert_array_equal(out.samples, utt.samples)
    assert out.device is Device.TARGET
    assert out.label is Label.CONTROL


def test_bandlimit_removes_high_frequencies():
    out = apply_channel(_noise(), DeviceProfile(Device.TARGET, bandlimit_hz=4000.0), seed=0)
    power = np.abs(np.fft.rfft(out.samples)) ** 2
    freqs = np.fft.rfftfreq(out.samples.size, 1.0 / SR)
    assert power[freqs > 8000].mean() < 1e-2 * power[freqs < 3000].mean()


def test_spectral_tilt_per_octave():
    t = np.arange(SR) / SR
    tone = Utterance(0.5 * np.sin(2 * np.pi * 2000.0 * t), SR, Device.SOURCE)
    out = apply_channel(tone, DeviceProfile(Device.TARGET, spectral_tilt_db_per_octave=-6.0), seed=0)
    assert np.max(np.abs(out.samples)) == pytest.approx(0.5 * 10 ** (-6.0 / 20.0), rel=1e-3)


def test_noise_floor_level():
    silence = Utterance(np.zeros(SR), SR, Device.SOURCE)
    out = apply_channel(silence, DeviceProfile(Device.TARGET, noise_floor_db=-40.0), seed=1)
    assert out.samples.std() == pytest.approx(0.01, rel=0.05)


def test_impulse_response_is_peak_normalized():
    profile = DeviceProfile(Device.TARGET, impulse_response=(2.0, 2.0))
    assert np.abs(np.fft.rfft(profile.impulse_response, n=4096)).max() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        DeviceProfile(Device.TARGET, impulse_response=(0.0, 0.0))


# ── corpus ──

def test_ci_corpus_layout():
    corpus = build_corpus(CorpusSpec.for_scale("ci"), seed=0)
    manifest = corpus.manifest()
    assert len(manifest) == 30
    assert list(manifest.columns) == ["id", "path", "device", "label", "subset"]
    counts = manifest.groupby("subset").size().to_dict()
    assert counts == {"source_train": 16, "source_test": 4, "target_adapt": 5, "target_test": 5}
    for subset in SUBSETS:
        assert manifest[manifest.subset == subset].label.nunique() == 2
    assert set(manifest[manifest.device == "target"].subset) == {"target_adapt", "target_test"}
    assert manifest.id.is_unique


def test_ids_are_numbered_per_class():
    ids = set(build_corpus(CorpusSpec.for_scale("ci").model_copy(update={"duration_s": 0.1}), 0).manifest().id)
    assert {f"src-path-{k:03d}" for k in range(10)} <= ids
    assert {f"src-ctrl-{k:03d}" for k in range(10)} <= ids
    assert {f"tgt-path-{k:03d}" for k in range(6)} <= ids
    assert {f"tgt-ctrl-{k:03d}" for k in range(4)} <= ids


def test_corpus_is_reproducible():
    spec = CorpusSpec.for_scale("ci").model_copy(update={"duration_s": 0.1})
    first, second = build_corpus(spec, 7), build_corpus(spec, 7)
    for a, b in zip(first.records, second.records):
        np.testing.assert_array_equal(a.recorded.samples, b.recorded.samples)
    pd.testing.assert_frame_equal(first.manifest(), second.manifest())
    other = build_corpus(spec, 8)
    assert not np.array_equal(first.records[0].recorded.samples, other.records[0].recorded.samples)


def test_utterances_do_not_depend_on_later_counts():
    spec = CorpusSpec.for_scale("ci").model_copy(update={"duration_s": 0.1})
    bigger = spec.model_copy(update={"target_pathological": 7})
    small, large = build_corpus(spec, 3), build_corpus(bigger, 3)
    for a, b in zip(small.records[:20], large.records[:20]):
        assert a.id == b.id
        np.testing.assert_array_equal(a.recorded.samples, b.recorded.samples)


def test_pathological_voices_are_rougher():
    corpus = build_corpus(CorpusSpec.for_scale("ci").model_copy(update={"duration_s": 0.1}), 0)
    for record in corpus.records:
        if record.voice.label is Label.PATHOLOGICAL:
            assert record.voice.jitter >= 0.02 and record.voice.hnr_db <= 15.0
        else:
            assert record.voice.jitter <= 0.005 and record.voice.hnr_db >= 20.0


def test_generated_files_are_stable(tmp_path):
    spec = CorpusSpec.for_scale("ci").model_copy(update={"duration_s": 0.1})
    corpus = generate_corpus(spec, 0, str(tmp_path / "a"))
    again = generate_corpus(spec, 0, str(tmp_path / "b"))
    assert len(os.listdir(tmp_path / "a" / "wav")) == 30
    assert file_hash(corpus.manifest_path) == file_hash(again.manifest_path)
    first = corpus.records[0]
    assert file_hash(str(tmp_path / "a" / first.path)) == file_hash(str(tmp_path / "b" / first.path))
    utt = read_wav(str(tmp_path / "a" / first.path))
    assert utt.sample_rate == SR
    assert utt.samples.size == int(0.1 * SR)


def test_self_test_on_ci_corpus():
    report = self_test(build_corpus(CorpusSpec.for_scale("ci"), seed=0))
    assert report.device_probe_accuracy > 0.95
    assert report.pathology_probe_accuracy > 0.7


@pytest.mark.slow
def test_full_corpus_passes_self_test():
    assert self_test(build_corpus(CorpusSpec(), seed=0)).passed
