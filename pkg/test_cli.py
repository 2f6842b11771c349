"""End-to-end tests of the davoc command line on a CI-scale corpus."""

import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from adapt import Regime
from cli import ExperimentMatrixSpec, build_train_config, main, run_gradcheck, summarize_matrix
from data_loader import load_features, load_manifest, split_from_manifest, write_split
from dsp import FeatureConfig, FeatureKind
from errors import ConfigError
from metrics import pr_auc
from models import ModelKind, load_model
from synthcorpus import file_hash

TRAIN_FAST = ["--scale", "ci", "--epochs", "1", "--feature-kind", "mfcc"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-corpus", "--scale", "ci", "--seed", "3", "--out", str(out), "--no-self-test"]) == 0
    return out


@pytest.fixture(scope="module")
def source_only(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("source-only")
    code = main(["train", "--manifest", str(corpus / "manifest.csv"), "--regime", "source-only",
                 "--seed", "1", "--out", str(out), *TRAIN_FAST])
    assert code == 0
    return out


# ── gen-corpus ──

def test_gen_corpus_layout(corpus):
    assert len(os.listdir(corpus / "wav")) == 30
    manifest = load_manifest(str(corpus / "manifest.csv"))
    assert set(manifest["subset"]) == {"source_train", "source_test", "target_adapt", "target_test"}


def test_gen_corpus_is_reproducible(corpus, tmp_path, capsys):
    assert main(["gen-corpus", "--scale", "ci", "--seed", "3", "--out", str(tmp_path), "--no-self-test"]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "manifest.csv")
    assert file_hash(str(tmp_path / "manifest.csv")) == file_hash(str(corpus / "manifest.csv"))
    assert file_hash(str(tmp_path / "wav" / "tgt-ctrl-000.wav")) == \
        file_hash(str(corpus / "wav" / "tgt-ctrl-000.wav"))


# ── extract-features ──

def test_extract_features_writes_caches(corpus, tmp_path, capsys):
    code = main(["extract-features", "--manifest", str(corpus / "manifest.csv"), "--cache-dir", str(tmp_path),
                 "--feature-kind", "mfcc", "--window-ms", "100"])
    assert code == 0
    assert "[286]" in capsys.readouterr().out
    key = FeatureConfig(kind=FeatureKind.MFCC, window_ms=100).cache_key()
    assert os.listdir(tmp_path) == [key]
    assert len(os.listdir(tmp_path / key)) == 30


def test_truncated_cache_is_re_extracted(corpus, tmp_path):
    manifest = load_manifest(str(corpus / "manifest.csv"))
    config = FeatureConfig(kind=FeatureKind.MFCC, window_ms=100)
    ids = ["src-path-000"]
    fresh = load_features(manifest, config, stack=True, ids=ids)["src-path-000"]
    stale = tmp_path / config.cache_key() / "src-path-000.stacked.davf"
    stale.parent.mkdir()
    stale.write_bytes(b"DAVF" + bytes(12))

    recovered = load_features(manifest, config, stack=True, ids=ids, cache_dir=str(tmp_path))["src-path-000"]
    np.testing.assert_array_equal(recovered.data, fresh.data)
    cached = load_features(manifest, config, stack=True, ids=ids, cache_dir=str(tmp_path))["src-path-000"]
    np.testing.assert_array_equal(cached.data, fresh.data)


# ── train / eval ──

def test_train_writes_checkpoint_and_metrics(source_only):
    history = pd.read_csv(source_only / "metrics.csv")
    assert list(history.columns) == ["epoch", "L_y", "L_d", "lambda", "train_pr_auc"]
    assert len(history) == 1
    model, header = load_model(str(source_only / "model.davc"))
    assert model.config.kind is ModelKind.BLSTM
    assert model.config.input_dim == 286
    assert header["train"]["regime"] == "source-only"
    assert header["label_reads"]["target"] == 0


def test_eval_writes_scores_curve_and_summary(corpus, source_only, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(source_only / "model.davc"),
                 "--manifest", str(corpus / "manifest.csv"), "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.startswith("PR-AUC ")
    scores = pd.read_csv(tmp_path / "scores_target_test.csv")
    assert list(scores.columns) == ["utterance_id", "score", "label", "device"]
    assert len(scores) == 5
    assert scores["score"].between(0.0, 1.0).all()
    assert set(scores["device"]) == {"target"}
    summary = json.loads((tmp_path / "summary_target_test.json").read_text())
    assert 0.0 <= summary["auc"] <= 1.0
    assert summary["auc"] == pr_auc(scores["score"], (scores["label"] == "pathological").astype(int)).auc
    assert summary["n_pos"] + summary["n_neg"] == 5
    assert (tmp_path / "curve_target_test.csv").exists()


def test_eval_refuses_other_features(corpus, source_only, tmp_path):
    code = main(["eval", "--checkpoint", str(source_only / "model.davc"),
                 "--manifest", str(corpus / "manifest.csv"), "--feature-kind", "fbank", "--out", str(tmp_path)])
    assert code == 2


def test_eval_missing_checkpoint(corpus, tmp_path):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.davc"), "--manifest", str(corpus / "manifest.csv")])
    assert code == 3


def test_frozen_finetune_from_checkpoint(corpus, source_only, tmp_path):
    code = main(["train", "--manifest", str(corpus / "manifest.csv"), "--regime", "frozen-finetune",
                 "--pretrained", str(source_only / "model.davc"), "--finetune-epochs", "2",
                 "--out", str(tmp_path), *TRAIN_FAST])
    assert code == 0
    assert len(pd.read_csv(tmp_path / "metrics.csv")) == 2
    tuned, _ = load_model(str(tmp_path / "model.davc"))
    pretrained, _ = load_model(str(source_only / "model.davc"))
    for (name, a), (_, b) in zip(tuned.encoder_parameters(), pretrained.encoder_parameters()):
        assert a.equal(b), name


def test_unsupervised_dat_from_run_manifest(corpus, tmp_path):
    run = tmp_path / "run.env"
    run.write_text(f"regime=dat-unsup\nmodel=mlp\nfeature_kind=mfcc\nlambda=0.5\nlambda_schedule=ramp\n"
                   f"epochs=1\nscale=ci\nmanifest={corpus / 'manifest.csv'}\n")
    assert main(["train", "--config", str(run), "--out", str(tmp_path / "out")]) == 0
    _, header = load_model(str(tmp_path / "out" / "model.davc"))
    assert header["train"]["regime"] == "dat-unsup"
    assert header["train"]["lambda_schedule"] == "ramp"
    assert header["label_reads"]["target"] == 0
    assert not math.isnan(pd.read_csv(tmp_path / "out" / "metrics.csv")["L_d"][0])


def test_unknown_run_manifest_key(tmp_path):
    run = tmp_path / "run.env"
    run.write_text("regime=dat-unsup\nlearning_rate=0.1\n")
    assert main(["train", "--config", str(run)]) == 2


def test_train_without_manifest():
    assert main(["train", "--regime", "source-only"]) == 2


def test_dat_without_target_set(corpus, tmp_path):
    sections = split_from_manifest(load_manifest(str(corpus / "manifest.csv")))
    sections["target_adapt"] = []
    split = tmp_path / "split.txt"
    write_split(str(split), sections)
    code = main(["train", "--manifest", str(corpus / "manifest.csv"), "--split", str(split),
                 "--regime", "dat-unsup", "--out", str(tmp_path / "out"), *TRAIN_FAST])
    assert code == 3


def test_flags_override_run_manifest_values():
    config = build_train_config({"regime": "dat-sup", "lambda": "0.25", "normalized": "true",
                                 "window_ms": "100", "seed": 4, "scale": "ci"})
    assert config.regime is Regime.DAT_SUPERVISED
    assert config.lambda_spec.lambda0 == 0.25
    assert config.features.normalized
    assert config.features.label() == "fbank-norm-100ms"
    assert config.epochs == 3
    with pytest.raises(ConfigError):
        build_train_config({"regime": "dat-unsup", "lr": "-1", "seed": 0})
    with pytest.raises(ConfigError):
        build_train_config({"normalized": "maybe", "seed": 0})


# ── matrix ──

def test_matrix_presets():
    assert len(ExperimentMatrixSpec.preset("features", [0]).cells()) == 8
    assert len(ExperimentMatrixSpec.preset("models", [0]).cells()) == 8
    regimes = ExperimentMatrixSpec.preset("regimes", [0, 1])
    assert len(regimes.cells()) == 5
    assert regimes.eval_subset == "target_test"
    assert ExperimentMatrixSpec.preset("features", [0]).eval_subset == "source_test"
    with pytest.raises(ValueError):
        ExperimentMatrixSpec(kind="regimes", features=[], models=[ModelKind.BLSTM], regimes=list(Regime))


def test_matrix_summary_and_welch_pairs():
    spec = ExperimentMatrixSpec.preset("regimes", [0, 1, 2])
    values = {"dat-unsup": [0.9, 0.92, 0.91], "dat-sup": [0.93, 0.94, 0.92], "source-only": [0.6, 0.62, 0.58]}
    records = []
    for model, features, regime in spec.cells():
        name = f"{regime.value}/{model.value}/{features.label()}"
        for seed in spec.seeds:
            if regime.value in values:
                records.append({"cell": name, "seed": seed, "pr_auc": values[regime.value][seed], "error": ""})
            else:
                records.append({"cell": name, "seed": seed, "pr_auc": float("nan"), "error": "boom"})
    table, tests = summarize_matrix(spec, records)
    row = table.set_index("regime").loc["dat-unsup"]
    assert row["mean"] == pytest.approx(0.91)
    assert row["n_ok"] == 3
    assert table.set_index("regime").loc["target-only", "n_failed"] == 3
    pairs = {(a, b): p for a, b, p in zip(tests["a"], tests["b"], tests["p_value"])}
    assert set(pairs) == {("dat-unsup", "source-only"), ("dat-sup", "source-only"), ("dat-sup", "dat-unsup")}
    assert pairs[("dat-unsup", "source-only")] < 0.01
    assert pairs[("dat-sup", "source-only")] < 0.01


@pytest.mark.slow
def test_regime_matrix_end_to_end(corpus, tmp_path):
    code = main(["matrix", "--kind", "regimes", "--manifest", str(corpus / "manifest.csv"), "--scale", "ci",
                 "--epochs", "1", "--seeds", "2", "--out", str(tmp_path)])
    assert code == 0
    runs = pd.read_csv(tmp_path / "runs_regimes.csv")
    assert len(runs) == 10
    assert len(pd.read_csv(tmp_path / "matrix_regimes.csv")) == 5
    assert len(pd.read_csv(tmp_path / "ttests_regimes.csv")) == 7


# ── gradcheck ──

def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for component in ("dense", "lstm", "bilstm", "softmax-ce", "grl", "blstm-stack", "mlp-stack"):
        assert component in out
    assert "zero gradient" not in out


def test_gradcheck_single_component(capsys):
    assert main(["gradcheck", "--component", "grl", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("grl")
    assert "forward deviation 0.0e+00" in out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stack_gradcheck_is_not_degenerate(seed):
    results = run_gradcheck(["mlp-stack", "blstm-stack"], eps=1e-5, seed=seed)
    for result in results.values():
        assert result["worst"] < 1e-4
        assert result["vanishing"] == []
