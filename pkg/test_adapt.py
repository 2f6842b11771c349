"""Tests for the training regimes and the label-blindness bookkeeping."""

import math

import numpy as np
import pandas as pd
import pytest
import torch

from adapt import (
    METRICS_COLUMNS, DegenerateLabelsError, DomainSplit, EmptySplitError, Example, LabelLeakError,
    LabelLedger, LambdaSpec, MissingPretrainedError, Regime, TrainConfig, build_examples,
    device_probe_accuracy, hide_labels, lambda_schedule, run_regime, train_dat, train_frozen_finetune,
    train_source_only, train_target_only,
)
from dsp import Device, FeatureConfig, FeatureKind, FeatureMatrix, Label, extract_features
from errors import ConfigError, DataError
from metrics import pr_auc, welch_t_test
from models import ModelKind, Scale, parameter_checksum
from netcore import DTYPE
from synthcorpus import SUBSETS, CorpusSpec, build_corpus

FEATURES = FeatureConfig(kind=FeatureKind.MFCC, n_mel_filters=4, n_cepstra=4, context=1)


def _toy_examples(n_per_cell=6, seed=0, separation=3.0, channel_shift=2.0):
    """Pathology moves dim 0; the target device shifts every dim."""
    rng = np.random.default_rng(seed)
    examples, sections = {}, {"source_train": [], "source_test": [], "target_adapt": [], "target_test": []}
    for device in Device:
        for label in (Label.CONTROL, Label.PATHOLOGICAL):
            for k in range(n_per_cell):
                data = 0.3 * rng.standard_normal((5, 4))
                data[:, 0] += separation * label.index
                data += channel_shift * device.index
                utt_id = f"{device.value[:3]}-{label.value[:4]}-{k:03d}"
                examples[utt_id] = Example(utt_id, torch.as_tensor(data, dtype=DTYPE), device, label)
                half = "train" if device is Device.SOURCE else "adapt"
                sections[f"{device.value}_{half if k < n_per_cell - 2 else 'test'}"].append(utt_id)
    return examples, DomainSplit.from_sections(sections)


def _config(regime=Regime.SOURCE_ONLY, **overrides):
    overrides.setdefault("epochs", 2)
    overrides.setdefault("batch_size", 4)
    overrides.setdefault("features", FEATURES)
    return TrainConfig.for_scale(Scale.CI, regime=regime, **overrides)


def _checksum(model):
    return parameter_checksum(model.named_parameters())


# ── lambda schedule ──

def test_constant_lambda():
    spec = LambdaSpec(lambda0=0.3)
    assert lambda_schedule(0.0, spec) == 0.3
    assert lambda_schedule(1.0, spec) == 0.3


def test_ramp_lambda():
    spec = LambdaSpec(schedule="ramp", lambda0=2.0)
    assert lambda_schedule(0.0, spec) == 0.0
    assert lambda_schedule(1.0, spec) == pytest.approx(2.0 * (2.0 / (1.0 + math.exp(-10.0)) - 1.0))
    values = [lambda_schedule(p, spec) for p in np.linspace(0, 1, 11)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_lambda_progress_out_of_range():
    with pytest.raises(ValueError):
        lambda_schedule(1.5, LambdaSpec())
    with pytest.raises(ValueError):
        LambdaSpec(lambda0=-1.0)


# ── config and data ──

def test_train_config_scale_defaults():
    assert TrainConfig.for_scale(Scale.CI).epochs == 3
    assert TrainConfig.for_scale(Scale.PAPER).epochs == 100
    assert TrainConfig.for_scale(Scale.CI, epochs=7).epochs == 7
    header = _config(Regime.DAT_UNSUPERVISED).header()
    assert header["regime"] == "dat-unsup"
    assert header["lambda"] == 1.0
    assert header["scale"] == "ci"


def test_regime_adversarial_flag():
    assert Regime.DAT_SUPERVISED.adversarial
    assert Regime.DAT_UNSUPERVISED.adversarial
    assert not Regime.FROZEN_FINETUNE.adversarial


def test_split_sections_must_be_disjoint():
    with pytest.raises(DataError):
        DomainSplit(source_train=("a", "b"), target_test=("b",))


def test_build_examples_from_manifest():
    manifest = pd.DataFrame({"id": ["a", "b", "c"], "device": ["source", "target", "target"],
                             "label": ["pathological", "", "control"]})
    features = {i: FeatureMatrix(np.zeros((3, 4)), FEATURES, i) for i in ("a", "b")}
    examples = build_examples(features, manifest)
    assert sorted(examples) == ["a", "b"]
    assert examples["b"].device is Device.TARGET
    assert LabelLedger().read(examples["a"]) == 1
    with pytest.raises(DataError):
        LabelLedger().read(examples["b"])


def test_ledger_counts_reads_per_device():
    examples, _ = _toy_examples()
    ledger = LabelLedger()
    for e in examples.values():
        ledger.read(e)
    assert ledger.as_dict() == {"source": 12, "target": 12}
    assert ledger.target_reads == 12


def test_hidden_labels_cannot_be_read():
    examples, split = _toy_examples()
    hidden = hide_labels([examples[i] for i in split.target_adapt])
    assert all(e.hidden for e in hidden)
    with pytest.raises(LabelLeakError):
        LabelLedger().read(hidden[0])


# ── failure modes ──

def test_empty_source_train():
    examples, split = _toy_examples()
    empty = DomainSplit(source_train=(), target_adapt=split.target_adapt)
    with pytest.raises(EmptySplitError):
        train_source_only(_config(), empty, examples)


def test_single_class_target_set():
    examples, split = _toy_examples()
    controls = tuple(i for i in split.target_adapt if "-cont-" in i)
    one_class = DomainSplit(source_train=split.source_train, target_adapt=controls)
    with pytest.raises(DegenerateLabelsError):
        train_target_only(_config(Regime.TARGET_ONLY), one_class, examples)


def test_split_names_unknown_utterance():
    examples, split = _toy_examples()
    with pytest.raises(DataError):
        train_source_only(_config(), DomainSplit(source_train=split.source_train + ("ghost",)), examples)


def test_finetune_needs_pretrained():
    examples, split = _toy_examples()
    with pytest.raises(MissingPretrainedError):
        train_frozen_finetune(_config(Regime.FROZEN_FINETUNE), split, examples, None)


def test_finetune_rejects_other_input_dims():
    examples, split = _toy_examples()
    pretrained = train_source_only(_config(epochs=1), split, examples).model
    wider = FeatureConfig(kind=FeatureKind.MFCC, n_mel_filters=5, n_cepstra=5, context=1)
    with pytest.raises(ConfigError):
        train_frozen_finetune(_config(Regime.FROZEN_FINETUNE, features=wider), split, examples, pretrained)


def test_train_dat_rejects_plain_regimes():
    examples, split = _toy_examples()
    with pytest.raises(ConfigError):
        train_dat(_config(Regime.SOURCE_ONLY), split, examples)


# ── regimes ──

def test_history_has_one_row_per_epoch(tmp_path):
    examples, split = _toy_examples()
    result = train_source_only(_config(epochs=3), split, examples)
    assert list(result.history.columns) == METRICS_COLUMNS
    assert list(result.history["epoch"]) == [1, 2, 3]
    assert result.history["L_d"].isna().all()
    assert result.label_reads["target"] == 0

    path = tmp_path / "metrics.csv"
    result.write_metrics(str(path))
    assert list(pd.read_csv(path).columns) == METRICS_COLUMNS


def test_same_seed_same_model():
    examples, split = _toy_examples()
    first = train_dat(_config(Regime.DAT_SUPERVISED, seed=4), split, examples)
    second = train_dat(_config(Regime.DAT_SUPERVISED, seed=4), split, examples)
    other = train_dat(_config(Regime.DAT_SUPERVISED, seed=5), split, examples)
    assert _checksum(first.model) == _checksum(second.model)
    assert _checksum(first.model) != _checksum(other.model)
    pd.testing.assert_frame_equal(first.history, second.history)


def test_unsupervised_dat_never_reads_target_labels():
    examples, split = _toy_examples()
    result = train_dat(_config(Regime.DAT_UNSUPERVISED), split, examples)
    assert result.label_reads == {"source": result.label_reads["source"], "target": 0}
    assert result.label_reads["source"] > 0
    assert result.history["L_d"].notna().all()
    assert (result.history["lambda"] == 1.0).all()


def test_supervised_dat_reads_target_labels():
    examples, split = _toy_examples()
    result = train_dat(_config(Regime.DAT_SUPERVISED), split, examples)
    assert result.label_reads["target"] > 0


def test_zero_lambda_dat_equals_source_only():
    examples, split = _toy_examples()
    baseline = train_source_only(_config(seed=2, epochs=3), split, examples)
    dat = train_dat(_config(Regime.DAT_UNSUPERVISED, seed=2, epochs=3, lambda_spec=LambdaSpec(lambda0=0.0)),
                    split, examples)
    assert parameter_checksum(dat.model.predictor_parameters()) == \
        parameter_checksum(baseline.model.predictor_parameters())
    assert list(dat.history["L_y"]) == list(baseline.history["L_y"])


def test_ramp_lambda_is_logged_per_epoch():
    examples, split = _toy_examples()
    result = train_dat(_config(Regime.DAT_UNSUPERVISED, epochs=3,
                               lambda_spec=LambdaSpec(schedule="ramp")), split, examples)
    lambdas = list(result.history["lambda"])
    assert lambdas[0] < lambdas[1] < lambdas[2]
    assert lambdas[2] == pytest.approx(2.0 / (1.0 + math.exp(-10.0)) - 1.0)


def test_zero_epoch_finetune_keeps_the_pretrained_model():
    examples, split = _toy_examples()
    pretrained = train_source_only(_config(), split, examples).model
    result = train_frozen_finetune(_config(Regime.FROZEN_FINETUNE, finetune_epochs=0), split, examples,
                                   pretrained)
    assert _checksum(result.model) == _checksum(pretrained)
    assert len(result.history) == 0


def test_finetune_only_moves_the_label_head():
    examples, split = _toy_examples()
    pretrained = train_source_only(_config(), split, examples).model
    before = _checksum(pretrained)
    result = train_frozen_finetune(_config(Regime.FROZEN_FINETUNE, finetune_epochs=2), split, examples,
                                   pretrained)
    assert parameter_checksum(result.model.encoder_parameters()) == \
        parameter_checksum(pretrained.encoder_parameters())
    assert parameter_checksum(result.model.label_parameters()) != \
        parameter_checksum(pretrained.label_parameters())
    assert _checksum(pretrained) == before
    assert all(p.requires_grad for p in result.model.parameters())
    assert result.label_reads["target"] > 0


def test_run_regime_trains_its_own_pretrained_model():
    examples, split = _toy_examples()
    result = run_regime(_config(Regime.FROZEN_FINETUNE, finetune_epochs=1), split, examples)
    assert result.config.regime is Regime.FROZEN_FINETUNE
    assert len(result.history) == 1


@pytest.mark.parametrize("kind", [ModelKind.BLSTM, ModelKind.MLP])
def test_separable_source_is_ranked_perfectly(kind):
    examples, split = _toy_examples(n_per_cell=8)
    config = _config(model_kind=kind, epochs=40, lr=1e-2, seed=1)
    model = train_source_only(config, split, examples).model
    test = [examples[i] for i in split.source_test]
    scores = model.pathology_scores(torch.stack([e.features for e in test])).numpy()
    labels = [LabelLedger().read(e) for e in test]
    assert pr_auc(scores, labels).auc > 0.95


def test_device_probe_sees_the_channel_shift():
    examples, split = _toy_examples(n_per_cell=10)
    model = train_source_only(_config(epochs=1), split, examples).model
    assert device_probe_accuracy(model, list(examples.values())) > 0.9


def test_training_logs_losses_without_grad_warnings(recwarn):
    examples, split = _toy_examples()
    train_source_only(_config(epochs=1), split, examples)
    train_dat(_config(Regime.DAT_UNSUPERVISED, epochs=1), split, examples)
    assert not [w for w in recwarn if "requires_grad" in str(w.message)]


def test_input_scaler_is_fitted_on_the_training_pool():
    examples, split = _toy_examples()
    source_frames = torch.cat([examples[i].features for i in split.source_train])
    target_frames = torch.cat([examples[i].features for i in split.target_adapt])
    source_model = train_source_only(_config(epochs=1), split, examples).model
    target_model = train_target_only(_config(Regime.TARGET_ONLY, epochs=1), split, examples).model
    dat_model = train_dat(_config(Regime.DAT_UNSUPERVISED, epochs=1), split, examples).model
    assert torch.allclose(source_model.input_mean, source_frames.mean(dim=0), atol=1e-12)
    assert torch.allclose(target_model.input_mean, target_frames.mean(dim=0), atol=1e-12)
    assert torch.equal(dat_model.input_mean, source_model.input_mean)
    assert torch.equal(dat_model.input_scale, source_model.input_scale)


# ── desk-scale regime ordering ──

DESK_SEEDS = [0, 1, 2, 3, 4]


def _subset_pr_auc(model, examples, ids):
    members = [examples[i] for i in ids]
    scores = model.pathology_scores(torch.stack([e.features for e in members])).numpy()
    ledger = LabelLedger()
    return pr_auc(scores, [ledger.read(e) for e in members]).auc


@pytest.fixture(scope="module")
def desk_corpus():
    corpus = build_corpus(CorpusSpec(), seed=7)
    features = FeatureConfig()
    examples, sections = {}, {name: [] for name in SUBSETS}
    for record in corpus.records:
        fm = extract_features(record.recorded, features)
        examples[record.id] = Example.from_features(fm, record.recorded.device, record.voice.label)
        sections[record.subset].append(record.id)
    return examples, DomainSplit.from_sections(sections)


@pytest.fixture(scope="module")
def desk_runs(desk_corpus):
    """Trained models per regime and seed on the desk-scale corpus."""
    examples, split = desk_corpus
    runs = {regime: [] for regime in Regime}
    for seed in DESK_SEEDS:
        config = TrainConfig.for_scale(Scale.DESK, seed=seed)
        source_only = run_regime(config.model_copy(update={"regime": Regime.SOURCE_ONLY}), split, examples).model
        runs[Regime.SOURCE_ONLY].append(source_only)
        for regime in (Regime.TARGET_ONLY, Regime.FROZEN_FINETUNE, Regime.DAT_SUPERVISED, Regime.DAT_UNSUPERVISED):
            result = run_regime(config.model_copy(update={"regime": regime}), split, examples, pretrained=source_only)
            runs[regime].append(result.model)
    return runs


def _target_aucs(desk_corpus, desk_runs, regime):
    examples, split = desk_corpus
    return [_subset_pr_auc(model, examples, split.target_test) for model in desk_runs[regime]]


@pytest.mark.slow
def test_source_only_degrades_on_the_target_device(desk_corpus, desk_runs):
    examples, split = desk_corpus
    source = np.mean([_subset_pr_auc(m, examples, split.source_test) for m in desk_runs[Regime.SOURCE_ONLY]])
    target = np.mean(_target_aucs(desk_corpus, desk_runs, Regime.SOURCE_ONLY))
    assert source - target >= 0.10


@pytest.mark.slow
def test_adaptation_beats_the_baselines_on_the_target_device(desk_corpus, desk_runs):
    auc = {regime: _target_aucs(desk_corpus, desk_runs, regime) for regime in Regime}
    mean = {regime: float(np.mean(values)) for regime, values in auc.items()}
    assert mean[Regime.DAT_UNSUPERVISED] >= mean[Regime.SOURCE_ONLY] + 0.05
    assert mean[Regime.DAT_SUPERVISED] >= mean[Regime.DAT_UNSUPERVISED] - 0.02
    assert mean[Regime.FROZEN_FINETUNE] > mean[Regime.SOURCE_ONLY]
    assert welch_t_test(auc[Regime.DAT_UNSUPERVISED], auc[Regime.SOURCE_ONLY]).p_value < 0.05


@pytest.mark.slow
def test_adversarial_training_hides_the_device(desk_corpus, desk_runs):
    examples, split = desk_corpus
    held_out = [examples[i] for i in split.source_test + split.target_test]
    dat = [device_probe_accuracy(m, held_out, seed=s)
           for s, m in zip(DESK_SEEDS[:3], desk_runs[Regime.DAT_UNSUPERVISED])]
    baseline = [device_probe_accuracy(m, held_out, seed=s)
                for s, m in zip(DESK_SEEDS[:3], desk_runs[Regime.SOURCE_ONLY])]
    assert np.mean(dat) < np.mean(baseline)
