"""
davoc command line.
Pipeline: gen-corpus -> extract-features -> train -> eval, plus the experiment
matrices and the gradient check.

    python cli.py gen-corpus --out data/corpus --seed 7
    python cli.py train --manifest data/corpus/manifest.csv --regime dat-unsup --lambda 1.0
    python cli.py eval --checkpoint data/runs/.../model.davc --manifest data/corpus/manifest.csv
    python cli.py matrix --kind regimes --manifest data/corpus/manifest.csv --jobs 4
    python cli.py gradcheck
"""

import argparse
import concurrent.futures
import logging
import os
import sys
from typing import Callable, Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from adapt import (
    DomainSplit, LambdaSpec, Regime, TrainConfig, build_examples, run_regime,
)
from data_loader import (
    load_features, load_manifest, load_run_manifest, load_scores, load_split, split_from_manifest,
    write_scores,
)
from dsp import FeatureConfig, FeatureKind, Label
from errors import ConfigError, DataError, DavocError, ThresholdBreach, exit_code_for
from metrics import aggregate_seeds, pr_auc, welch_t_test, write_curve_csv, write_summary
from models import DetectorGraph, ModelConfig, ModelKind, Scale, load_model, save_model
from netcore import (
    DTYPE, BiLstm, Dense, LstmLayer, cross_entropy, finite_difference_check, grl, relu,
)
from scoring import score_batch, score_features
from settings import configure_logging, data_dir, default_seed, load_env
from synthcorpus import CorpusSpec, file_hash, generate_corpus, self_test

logger = logging.getLogger("davoc")

GRADCHECK_TOLERANCE = 1e-4
RUN_MANIFEST_KEYS = (
    "regime", "model", "feature_kind", "window_ms", "normalized", "lambda", "lambda_schedule",
    "lr", "epochs", "finetune_epochs", "batch_size", "seed", "scale", "manifest", "split",
)


def _echo_config(command: str, values: dict) -> None:
    logger.info("─" * 60)
    logger.info("Effective config (%s):", command)
    for key in sorted(values):
        logger.info("  %s = %s", key, values[key])
    logger.info("─" * 60)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _seed(args) -> int:
    return default_seed() if args.seed is None else args.seed


def _stack_for(kind: ModelKind) -> bool:
    return kind is ModelKind.BLSTM


def _feature_cache(manifest_path: str, cache_dir: str | None) -> str:
    return cache_dir or os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "features")


def _load_split(manifest: pd.DataFrame, split_path: str | None) -> DomainSplit:
    sections = load_split(split_path) if split_path else split_from_manifest(manifest)
    return DomainSplit.from_sections(sections)


# ── gen-corpus ───────────────────────────────────────────────────

def cmd_gen_corpus(args) -> int:
    seed = _seed(args)
    spec = CorpusSpec.for_scale(args.scale)
    out = args.out or os.path.join(data_dir(), "corpus")
    _echo_config("gen-corpus", {"out": out, "seed": seed, "scale": args.scale, "utterances": spec.total})

    corpus = generate_corpus(spec, seed, out)
    print(corpus.manifest_path)
    logger.info("Manifest sha256 %s", file_hash(corpus.manifest_path))

    if not args.self_test:
        return 0
    report = self_test(corpus)
    print(f"self-test: device probe {report.device_probe_accuracy:.3f} (> {report.device_threshold}), "
          f"pathology probe {report.pathology_probe_accuracy:.3f} (> {report.pathology_threshold}) "
          f"-> {'pass' if report.passed else 'FAIL'}")
    if args.strict and not report.passed:
        raise ThresholdBreach("corpus self-test below thresholds")
    return 0


# ── extract-features ─────────────────────────────────────────────

def cmd_extract_features(args) -> int:
    features = FeatureConfig(kind=args.feature_kind, window_ms=args.window_ms, normalized=args.normalized)
    cache_dir = _feature_cache(args.manifest, args.cache_dir)
    _echo_config("extract-features", {"manifest": args.manifest, "features": features.label(),
                                      "stack": args.stack, "cache_dir": cache_dir})
    manifest = load_manifest(args.manifest)
    extracted = load_features(manifest, features, stack=args.stack, cache_dir=cache_dir)
    dims = {fm.dims for fm in extracted.values()}
    print(f"{len(extracted)} feature caches under {os.path.join(cache_dir, features.cache_key())} (dims {sorted(dims)})")
    return 0


# ── train ────────────────────────────────────────────────────────

def _train_values(args) -> dict:
    """Run-manifest values overridden by explicit flags."""
    values: dict = {}
    if args.config:
        from_file = load_run_manifest(args.config)
        unknown = sorted(set(from_file) - set(RUN_MANIFEST_KEYS))
        if unknown:
            raise ConfigError(f"unknown run-manifest keys: {', '.join(unknown)}")
        values.update(from_file)
    for key in RUN_MANIFEST_KEYS:
        flag = getattr(args, "lambda_" if key == "lambda" else key, None)
        if flag is not None:
            values[key] = flag
    values.setdefault("seed", default_seed())
    return values


def build_train_config(values: dict) -> TrainConfig:
    try:
        features = FeatureConfig(
            kind=FeatureKind(values.get("feature_kind", FeatureKind.FBANK.value)),
            window_ms=float(values.get("window_ms", 32.0)),
            normalized=_as_bool(values.get("normalized", False)),
        )
        kwargs = {
            "regime": Regime(values.get("regime", Regime.SOURCE_ONLY.value)),
            "model_kind": ModelKind(values.get("model", ModelKind.BLSTM.value)),
            "features": features,
            "lambda_spec": LambdaSpec(schedule=values.get("lambda_schedule", "constant"),
                                      lambda0=float(values.get("lambda", 1.0))),
            "seed": int(values["seed"]),
        }
        for key, cast in (("lr", float), ("epochs", int), ("finetune_epochs", int), ("batch_size", int)):
            if key in values and values[key] not in ("", None):
                kwargs[key] = cast(values[key])
        return TrainConfig.for_scale(Scale(values.get("scale", Scale.DESK.value)), **kwargs)
    except ValueError as e:
        if isinstance(e, DavocError):
            raise
        raise ConfigError(f"invalid training configuration: {e}") from e


def cmd_train(args) -> int:
    values = _train_values(args)
    if "manifest" not in values:
        raise ConfigError("train needs --manifest (or manifest= in the run manifest)")
    config = build_train_config(values)
    out = args.out or os.path.join(
        data_dir(), "runs", f"{config.regime.value}-{config.model_kind.value}-"
                            f"{config.features.label()}-seed{config.seed}")
    _echo_config("train", {**config.header(), "features": config.features.label(),
                           "manifest": values["manifest"], "split": values.get("split", "<manifest subsets>"),
                           "out": out})

    manifest = load_manifest(values["manifest"])
    split = _load_split(manifest, values.get("split"))
    needed = list(split.source_train) + list(split.target_adapt)
    features = load_features(manifest, config.features, stack=_stack_for(config.model_kind), ids=needed,
                             cache_dir=_feature_cache(values["manifest"], args.cache_dir))
    examples = build_examples(features, manifest)

    pretrained = None
    if args.pretrained:
        pretrained, _ = load_model(args.pretrained, expected_features=config.features)
    result = run_regime(config, split, examples, pretrained)

    os.makedirs(out, exist_ok=True)
    checkpoint = os.path.join(out, "model.davc")
    save_model(checkpoint, result.model, config.features, **result.checkpoint_extra())
    result.write_metrics(os.path.join(out, "metrics.csv"))
    logger.info("Label reads per device: %s", result.label_reads)
    print(checkpoint)
    return 0


# ── eval ─────────────────────────────────────────────────────────

def _explicit_features(args) -> FeatureConfig | None:
    if args.feature_kind is None and args.window_ms is None and args.normalized is None:
        return None
    return FeatureConfig(kind=args.feature_kind or FeatureKind.FBANK,
                         window_ms=args.window_ms or 32.0, normalized=bool(args.normalized))


def cmd_eval(args) -> int:
    model, header = load_model(args.checkpoint, expected_features=_explicit_features(args))
    features_config = FeatureConfig(**header["features"])
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    _echo_config("eval", {"checkpoint": args.checkpoint, "manifest": args.manifest, "subset": args.subset,
                          "features": features_config.label(), "model": model.config.kind.value, "out": out})

    manifest = load_manifest(args.manifest)
    split = _load_split(manifest, args.split)
    ids = list(getattr(split, args.subset))
    if not ids:
        raise DataError(f"subset {args.subset} is empty")
    features = load_features(manifest, features_config, stack=_stack_for(model.config.kind), ids=ids,
                             cache_dir=_feature_cache(args.manifest, args.cache_dir))
    rows = manifest.set_index("id").loc[ids]
    records = score_batch([features[i] for i in ids], labels=rows["label"].tolist(),
                          devices=rows["device"].tolist(), checkpoint=args.checkpoint)

    os.makedirs(out, exist_ok=True)
    scores_path = os.path.join(out, f"scores_{args.subset}.csv")
    write_scores(scores_path, records)
    scored = load_scores(scores_path)
    curve = pr_auc(scored["score"].to_numpy(),
                   (scored["label"] == Label.PATHOLOGICAL.value).astype(int).to_numpy())
    write_curve_csv(os.path.join(out, f"curve_{args.subset}.csv"), curve)
    write_summary(os.path.join(out, f"summary_{args.subset}.json"), curve,
                  subset=args.subset, checkpoint=os.path.abspath(args.checkpoint),
                  seed=header.get("seed"), features=features_config.label())
    print(f"PR-AUC {curve.auc:.4f} on {args.subset} ({curve.n_positive} pos / {curve.n_negative} neg)")
    return 0


# ── matrix ───────────────────────────────────────────────────────

_FEATURE_GRID = [FeatureConfig(kind=k, normalized=n, window_ms=w)
                 for k in (FeatureKind.MFCC, FeatureKind.FBANK)
                 for n in (False, True)
                 for w in (32.0, 100.0)]
_REGIME_PAIRS = [
    (Regime.DAT_UNSUPERVISED, Regime.SOURCE_ONLY),
    (Regime.DAT_UNSUPERVISED, Regime.TARGET_ONLY),
    (Regime.DAT_UNSUPERVISED, Regime.FROZEN_FINETUNE),
    (Regime.DAT_SUPERVISED, Regime.SOURCE_ONLY),
    (Regime.DAT_SUPERVISED, Regime.TARGET_ONLY),
    (Regime.DAT_SUPERVISED, Regime.FROZEN_FINETUNE),
    (Regime.DAT_SUPERVISED, Regime.DAT_UNSUPERVISED),
]


class ExperimentMatrixSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["features", "models", "regimes"]
    features: list[FeatureConfig]
    models: list[ModelKind]
    regimes: list[Regime]
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])

    @model_validator(mode="after")
    def _non_empty(self):
        if not (self.features and self.models and self.regimes and self.seeds):
            raise ValueError("every matrix axis needs at least one entry")
        return self

    @classmethod
    def preset(cls, kind: str, seeds: list[int]) -> "ExperimentMatrixSpec":
        if kind == "features":
            return cls(kind=kind, features=_FEATURE_GRID, models=[ModelKind.BLSTM],
                       regimes=[Regime.SOURCE_ONLY], seeds=seeds)
        if kind == "models":
            grid = [f for f in _FEATURE_GRID if f.window_ms == 32.0]
            return cls(kind=kind, features=grid, models=[ModelKind.BLSTM, ModelKind.MLP],
                       regimes=[Regime.SOURCE_ONLY], seeds=seeds)
        return cls(kind=kind, features=[FeatureConfig()], models=[ModelKind.BLSTM],
                   regimes=list(Regime), seeds=seeds)

    @property
    def eval_subset(self) -> str:
        """Feature and model tables compare on the source device; the regime table on the target."""
        return "target_test" if self.kind == "regimes" else "source_test"

    def cells(self) -> list[tuple[ModelKind, FeatureConfig, Regime]]:
        return [(m, f, r) for m in self.models for f in self.features for r in self.regimes]


def cell_name(model: ModelKind, features: FeatureConfig, regime: Regime) -> str:
    return f"{regime.value}/{model.value}/{features.label()}"


class CellJob(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_kind: ModelKind
    features: FeatureConfig
    regime: Regime
    seed: int
    scale: Scale
    epochs: int | None = None
    lambda_spec: LambdaSpec = LambdaSpec()
    manifest: str
    split: str | None = None
    cache_dir: str | None = None
    eval_subset: str = "target_test"

    @property
    def cell(self) -> str:
        return cell_name(self.model_kind, self.features, self.regime)


def run_cell(job: CellJob) -> dict:
    """Train and evaluate one (cell, seed); failures come back as records, not exceptions."""
    record = {"cell": job.cell, "seed": job.seed, "pr_auc": float("nan"), "error": ""}
    try:
        overrides = {"epochs": job.epochs} if job.epochs else {}
        config = TrainConfig.for_scale(job.scale, regime=job.regime, model_kind=job.model_kind,
                                       features=job.features, lambda_spec=job.lambda_spec,
                                       seed=job.seed, **overrides)
        manifest = load_manifest(job.manifest)
        split = _load_split(manifest, job.split)
        eval_ids = list(getattr(split, job.eval_subset))
        if not eval_ids:
            raise DataError(f"{job.eval_subset} is empty")
        ids = list(split.source_train) + list(split.target_adapt) + eval_ids
        features = load_features(manifest, job.features, stack=_stack_for(job.model_kind), ids=ids,
                                 cache_dir=_feature_cache(job.manifest, job.cache_dir))
        result = run_regime(config, split, build_examples(features, manifest))

        scores = score_features(result.model, [features[i] for i in eval_ids])
        labels = manifest.set_index("id").loc[eval_ids, "label"] == Label.PATHOLOGICAL.value
        record["pr_auc"] = pr_auc(scores, labels.astype(int).to_numpy()).auc
    except DavocError as e:
        logger.error("Cell %s seed %d failed: %s", job.cell, job.seed, e)
        record["error"] = str(e)
    return record


def _run_jobs(jobs: list[CellJob], workers: int) -> list[dict]:
    if workers <= 1:
        return [run_cell(job) for job in jobs]
    records = []
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(run_cell, job): job for job in jobs}
        for future in concurrent.futures.as_completed(futures):
            records.append(future.result())
    return sorted(records, key=lambda r: ([j.cell for j in jobs].index(r["cell"]), r["seed"]))


def summarize_matrix(spec: ExperimentMatrixSpec, records: list[dict]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-cell mean/std table, and Welch p-values between regime pairs."""
    runs = pd.DataFrame(records, columns=["cell", "seed", "pr_auc", "error"])
    rows = []
    per_cell: dict[str, list[float]] = {}
    for model, features, regime in spec.cells():
        name = cell_name(model, features, regime)
        cell = runs[runs["cell"] == name]
        ok = cell[cell["error"] == ""]["pr_auc"].tolist()
        per_cell[name] = ok
        summary = aggregate_seeds(ok) if ok else None
        rows.append({
            "cell": name, "regime": regime.value, "model": model.value, "features": features.label(),
            "mean": summary.mean if summary else float("nan"),
            "std": summary.std if summary else float("nan"),
            "n_ok": len(ok), "n_failed": int((cell["error"] != "").sum()),
        })
    table = pd.DataFrame(rows)

    tests = []
    if spec.kind == "regimes":
        for model in spec.models:
            for features in spec.features:
                for a, b in _REGIME_PAIRS:
                    if a not in spec.regimes or b not in spec.regimes:
                        continue
                    first = per_cell[cell_name(model, features, a)]
                    second = per_cell[cell_name(model, features, b)]
                    if len(first) < 2 or len(second) < 2:
                        logger.warning("Skipping t-test %s vs %s: fewer than two runs.", a.value, b.value)
                        continue
                    result = welch_t_test(first, second)
                    tests.append({"a": a.value, "b": b.value, "t": result.statistic,
                                  "dof": result.dof, "p_value": result.p_value})
    return table, pd.DataFrame(tests, columns=["a", "b", "t", "dof", "p_value"])


def cmd_matrix(args) -> int:
    seed = _seed(args)
    spec = ExperimentMatrixSpec.preset(args.kind, [seed + i for i in range(args.seeds)])
    out = args.out or os.path.join(data_dir(), "matrix")
    _echo_config("matrix", {"kind": spec.kind, "cells": len(spec.cells()), "seeds": spec.seeds,
                            "scale": args.scale, "epochs": args.epochs or "<scale default>",
                            "lambda": args.lambda_, "jobs": args.jobs, "manifest": args.manifest,
                            "eval_subset": spec.eval_subset, "out": out})

    jobs = [CellJob(model_kind=m, features=f, regime=r, seed=s, scale=args.scale, epochs=args.epochs,
                    lambda_spec=LambdaSpec(lambda0=args.lambda_), manifest=args.manifest,
                    split=args.split, cache_dir=args.cache_dir, eval_subset=spec.eval_subset)
            for m, f, r in spec.cells() for s in spec.seeds]
    records = _run_jobs(jobs, args.jobs)
    table, tests = summarize_matrix(spec, records)

    os.makedirs(out, exist_ok=True)
    pd.DataFrame(records).to_csv(os.path.join(out, f"runs_{spec.kind}.csv"), index=False)
    table.to_csv(os.path.join(out, f"matrix_{spec.kind}.csv"), index=False)
    print(table[["cell", "mean", "std", "n_ok", "n_failed"]].to_string(index=False, float_format="%.4f"))
    if not tests.empty:
        tests.to_csv(os.path.join(out, f"ttests_{spec.kind}.csv"), index=False)
        print(tests.to_string(index=False, float_format="%.4g"))

    if table["n_ok"].sum() == 0:
        raise DataError("every matrix cell failed")
    return 0


# ── gradcheck ────────────────────────────────────────────────────

class _Probe(nn.Module):
    """Dense -> ReLU -> GRL -> Dense."""

    def __init__(self, generator: torch.Generator, lambda_: float):
        super().__init__()
        self.first = Dense(3, 4, generator)
        self.second = Dense(4, 2, generator)
        self.lambda_ = lambda_

    def forward(self, x: torch.Tensor, reverse: bool = True) -> torch.Tensor:
        h = relu(self.first(x))
        return self.second(grl(h, self.lambda_) if reverse else h)


def _randn(generator: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


def _check_layer(module: nn.Module, x: torch.Tensor, generator: torch.Generator, eps: float):
    weights = _randn(generator, *module(x).shape)
    return finite_difference_check(module, lambda net: (net(x) * weights).sum(), eps)


def _check_dense(gen, eps):
    return _check_layer(Dense(3, 4, gen), _randn(gen, 2, 3), gen, eps), {}


def _check_lstm(gen, eps):
    return _check_layer(LstmLayer(3, 4, gen), _randn(gen, 2, 5, 3), gen, eps), {}


def _check_bilstm(gen, eps):
    return _check_layer(BiLstm(3, 4, gen), _randn(gen, 2, 5, 3), gen, eps), {}


def _check_softmax_ce(gen, eps):
    layer = Dense(3, 4, gen)
    x, targets = _randn(gen, 5, 3), torch.tensor([0, 3, 1, 2, 3])
    return finite_difference_check(layer, lambda net: cross_entropy(net(x), targets), eps), {}


def _check_grl(gen, eps):
    lambda_ = 0.7
    probe = _Probe(gen, lambda_)
    x, targets = _randn(gen, 4, 3), torch.tensor([0, 1, 1, 0])
    report = finite_difference_check(
        probe,
        lambda net: cross_entropy(net(x), targets),
        eps,
        objective_fn=lambda net: cross_entropy(net(x, reverse=False), targets),
        only=["second.weight", "second.bias"],
    )
    # below the GRL the descended objective is -lambda times the loss
    below = finite_difference_check(
        probe,
        lambda net: cross_entropy(net(x), targets),
        eps,
        objective_fn=lambda net: -lambda_ * cross_entropy(net(x, reverse=False), targets),
        only=["first.weight", "first.bias"],
    )
    report.errors.update(below.errors)
    h = _randn(gen, 4, 3)
    deviation = float((grl(h, lambda_) - h).abs().max())
    return report, {"forward_deviation": deviation}


def _stack_config(kind: ModelKind) -> ModelConfig:
    return ModelConfig(kind=kind, input_dim=5, dense_hidden=6, lstm_hidden=3, lstm_layers=2,
                       mlp_hidden=6, mlp_layers=3, device_hidden=6, device_layers=3)


def _check_stack(kind: ModelKind, gen, eps):
    lambda_ = 0.5
    model = DetectorGraph(_stack_config(kind), seed=int(torch.randint(0, 2 ** 31, (1,), generator=gen)))
    # biases in [0.5, 1) keep ReLU pre-activations off the kink at 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.5 + 0.5 * torch.rand(p.shape, generator=gen, dtype=DTYPE))
    x = _randn(gen, 2, 4, 5)
    labels, devices = torch.tensor([0, 1]), torch.tensor([1, 0])

    def losses(net, lam, reverse=True):
        frames, z = net.encode(x)
        return net.label_loss(frames, z, labels), cross_entropy(net.device_logits(z, lam, reverse), devices)

    def trained(net):
        label_loss, device_loss = losses(net, lambda_)
        return label_loss + device_loss

    def descended(net):
        label_loss, device_loss = losses(net, 1.0, reverse=False)
        return label_loss - lambda_ * device_loss

    names = [n for n, _ in model.named_parameters()]
    encoder = [n for n in names if n.startswith("encoder.")]
    heads = [n for n in names if not n.startswith("encoder.")]
    report = finite_difference_check(model, trained, eps, objective_fn=descended, only=encoder)
    head_report = finite_difference_check(model, trained, eps, only=heads)
    report.errors.update(head_report.errors)
    return report, {"vanishing": report.vanishing + head_report.vanishing}


GRADCHECK_COMPONENTS: dict[str, Callable] = {
    "dense": _check_dense,
    "lstm": _check_lstm,
    "bilstm": _check_bilstm,
    "softmax-ce": _check_softmax_ce,
    "grl": _check_grl,
    "blstm-stack": lambda gen, eps: _check_stack(ModelKind.BLSTM, gen, eps),
    "mlp-stack": lambda gen, eps: _check_stack(ModelKind.MLP, gen, eps),
}


def run_gradcheck(components: list[str], eps: float, seed: int) -> dict[str, dict]:
    results = {}
    for name in components:
        generator = torch.Generator().manual_seed(seed)
        report, extra = GRADCHECK_COMPONENTS[name](generator, eps)
        results[name] = {"worst": report.worst, "param": report.worst_param, **extra}
        logger.info("gradcheck %-12s worst relative error %.3e (%s)", name, report.worst, report.worst_param)
    return results


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    components = list(GRADCHECK_COMPONENTS) if args.component == "all" else [args.component]
    _echo_config("gradcheck", {"components": components, "eps": args.eps, "seed": seed,
                               "tolerance": GRADCHECK_TOLERANCE})
    results = run_gradcheck(components, args.eps, seed)
    for name, result in results.items():
        line = f"{name:<12} {result['worst']:.3e}"
        if "forward_deviation" in result:
            line += f"  forward deviation {result['forward_deviation']:.1e}"
        if result.get("vanishing"):
            line += f"  zero gradient: {', '.join(result['vanishing'])}"
        print(line)
    failed = [n for n, r in results.items()
              if not np.isfinite(r["worst"]) or r["worst"] > GRADCHECK_TOLERANCE or r.get("vanishing")]
    if failed:
        raise ThresholdBreach(f"relative error above {GRADCHECK_TOLERANCE:g} or zero gradients in: {', '.join(failed)}")
    return 0


# ── argument parsing ─────────────────────────────────────────────

def _add_feature_flags(parser: argparse.ArgumentParser, defaults: bool) -> None:
    parser.add_argument("--feature-kind", choices=[k.value for k in FeatureKind],
                        default=FeatureKind.FBANK.value if defaults else None)
    parser.add_argument("--window-ms", type=float, default=32.0 if defaults else None)
    parser.add_argument("--normalized", action=argparse.BooleanOptionalAction,
                        default=False if defaults else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="davoc", description="Channel-robust pathological voice detection.")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: DAVOC_LOG_LEVEL or INFO).")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scale=True):
        p.add_argument("--seed", type=int, default=None, help="Default: DAVOC_SEED or 0.")
        if scale:
            p.add_argument("--scale", choices=[s.value for s in Scale], default=None)

    p = sub.add_parser("gen-corpus", help="Synthesize the two-device vowel corpus.")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--self-test", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--strict", action="store_true", help="Fail when the self-test misses its thresholds.")
    p.set_defaults(func=cmd_gen_corpus, scale_default=Scale.DESK.value)

    p = sub.add_parser("extract-features", help="Write DAVF feature caches for a manifest.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--stack", action=argparse.BooleanOptionalAction, default=True)
    _add_feature_flags(p, defaults=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="Train one regime.")
    common(p)
    p.add_argument("--config", default=None, help="key=value run manifest; flags override it.")
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--regime", choices=[r.value for r in Regime], default=None)
    p.add_argument("--model", choices=[k.value for k in ModelKind], default=None)
    _add_feature_flags(p, defaults=False)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--lambda-schedule", choices=["constant", "ramp"], default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--pretrained", default=None, help="Source-only checkpoint for frozen-finetune.")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Score a subset with a checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--subset", choices=["source_train", "source_test", "target_adapt", "target_test"],
                   default="target_test")
    _add_feature_flags(p, defaults=False)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="Run a feature, model or regime experiment matrix.")
    common(p)
    p.add_argument("--kind", choices=["features", "models", "regimes"], required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--seeds", type=int, default=3, help="Number of consecutive seeds from --seed.")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_matrix, scale_default=Scale.DESK.value)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every layer and both stacks.")
    common(p, scale=False)
    p.add_argument("--component", choices=["all", *GRADCHECK_COMPONENTS], default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if getattr(args, "scale", None) is None and hasattr(args, "scale_default"):
        args.scale = args.scale_default
    try:
        return args.func(args)
    except DavocError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
