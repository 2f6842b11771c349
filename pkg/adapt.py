"""
Training regimes.

  source-only      label loss on the source device only (baseline 1)
  target-only      label loss on the small labeled target set (baseline 2)
  frozen-finetune  source-only model, encoder frozen, label head refit on target (baseline 3)
  dat-sup          domain-adversarial training, label loss on source and target
  dat-unsup        domain-adversarial training, target labels erased

DAT minimizes L_y + L_d in one backward pass. The gradient reversal layer in
front of the device head turns the device-loss gradient reaching the encoder
into -lambda * dL_d/dz, so plain descent gives the min-max objective.
"""

import copy
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from dsp import Device, FeatureConfig, FeatureMatrix, Label
from errors import ConfigError, DataError, NumericError
from metrics import NoPositivesError, linear_probe_accuracy, pr_auc
from models import DetectorGraph, ModelConfig, ModelKind, Scale, model_input_dim, parameter_checksum
from netcore import DTYPE, Adam, cross_entropy, gradient_clip

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "L_y", "L_d", "lambda", "train_pr_auc"]
EPOCHS_BY_SCALE = {Scale.PAPER: 100, Scale.DESK: 100, Scale.CI: 3}

# independent batch-order streams per seed
_SOURCE_STREAM = 101
_TARGET_STREAM = 102
_FINETUNE_STREAM = 103


class EmptySplitError(DataError, ValueError):
    pass


class DegenerateLabelsError(DataError, ValueError):
    pass


class LabelLeakError(DataError):
    pass


class MissingPretrainedError(ConfigError):
    pass


class Regime(str, Enum):
    SOURCE_ONLY = "source-only"
    TARGET_ONLY = "target-only"
    FROZEN_FINETUNE = "frozen-finetune"
    DAT_SUPERVISED = "dat-sup"
    DAT_UNSUPERVISED = "dat-unsup"

    @property
    def adversarial(self) -> bool:
        return self in (Regime.DAT_SUPERVISED, Regime.DAT_UNSUPERVISED)


# ── configuration ────────────────────────────────────────────────

class LambdaSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    schedule: Literal["constant", "ramp"] = "constant"
    lambda0: float = Field(1.0, ge=0.0)


def lambda_schedule(progress: float, spec: LambdaSpec) -> float:
    """GRL scale at training progress p in [0, 1]: constant lambda0 or the sigmoid ramp."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    if spec.schedule == "constant":
        return spec.lambda0
    return spec.lambda0 * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    regime: Regime = Regime.SOURCE_ONLY
    model_kind: ModelKind = ModelKind.BLSTM
    features: FeatureConfig = FeatureConfig()
    lambda_spec: LambdaSpec = LambdaSpec()
    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(100, ge=1)
    finetune_epochs: int | None = Field(None, ge=0)
    batch_size: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)
    scale: Scale = Scale.DESK
    clip_norm: float = Field(5.0, gt=0.0)

    @classmethod
    def for_scale(cls, scale: Scale, **overrides) -> "TrainConfig":
        overrides.setdefault("epochs", EPOCHS_BY_SCALE[Scale(scale)])
        return cls(scale=scale, **overrides)

    def network(self) -> ModelConfig:
        return ModelConfig.for_scale(self.model_kind, model_input_dim(self.model_kind, self.features), self.scale)

    def header(self) -> dict:
        """Flat description stored in checkpoints and echoed by the CLI."""
        return {
            "regime": self.regime.value,
            "model_kind": self.model_kind.value,
            "lambda": self.lambda_spec.lambda0,
            "lambda_schedule": self.lambda_spec.schedule,
            "lr": self.lr,
            "epochs": self.epochs,
            "finetune_epochs": self.finetune_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "scale": self.scale.value,
            "clip_norm": self.clip_norm,
        }


# ── data ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DomainSplit:
    source_train: tuple[str, ...]
    source_test: tuple[str, ...] = ()
    target_adapt: tuple[str, ...] = ()
    target_test: tuple[str, ...] = ()

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("source_train", "source_test", "target_adapt", "target_test"):
            ids = tuple(getattr(self, name))
            object.__setattr__(self, name, ids)
            for utt_id in ids:
                if utt_id in seen:
                    raise DataError(f"utterance {utt_id} is in both {seen[utt_id]} and {name}")
                seen[utt_id] = name

    @classmethod
    def from_sections(cls, sections: dict[str, list[str]]) -> "DomainSplit":
        return cls(*(tuple(sections.get(n, ())) for n in
                     ("source_train", "source_test", "target_adapt", "target_test")))


@dataclass(eq=False)
class Example:
    """One training utterance. The label is reachable only through a LabelLedger."""

    id: str
    features: torch.Tensor
    device: Device
    _label: Label | None = field(default=None, repr=False)
    hidden: bool = False

    @classmethod
    def from_features(cls, fm: FeatureMatrix, device: Device, label: Label | None = None) -> "Example":
        return cls(fm.utterance_id, torch.as_tensor(fm.data, dtype=DTYPE), device, label)

    def without_label(self) -> "Example":
        return Example(self.id, self.features, self.device, None, hidden=True)


def build_examples(features: dict[str, FeatureMatrix], manifest: pd.DataFrame) -> dict[str, Example]:
    """Pair feature matrices with the device and label columns of the manifest."""
    examples = {}
    for row in manifest.itertuples(index=False):
        if row.id not in features:
            continue
        label = Label(row.label) if row.label else None
        examples[row.id] = Example.from_features(features[row.id], Device(row.device), label)
    return examples


def hide_labels(examples: list[Example]) -> list[Example]:
    return [e.without_label() for e in examples]


class LabelLedger:
    """Counts label reads per device and refuses reads of erased labels."""

    def __init__(self):
        self.reads: Counter = Counter()

    def read(self, example: Example) -> int:
        if example.hidden:
            raise LabelLeakError(f"label of {example.id} was erased for this regime")
        if example._label is None:
            raise DataError(f"utterance {example.id} has no label")
        self.reads[example.device.value] += 1
        return example._label.index

    @property
    def target_reads(self) -> int:
        return self.reads[Device.TARGET.value]

    def as_dict(self) -> dict[str, int]:
        return {d.value: self.reads[d.value] for d in Device}


@dataclass
class TrainResult:
    model: DetectorGraph
    config: TrainConfig
    history: pd.DataFrame
    label_reads: dict[str, int]

    def write_metrics(self, path: str) -> None:
        self.history.to_csv(path, index=False)
        logger.info("Wrote %d epochs of metrics to %s.", len(self.history), path)

    def checkpoint_extra(self) -> dict:
        return {"train": self.config.header(), "label_reads": self.label_reads}


def _pool(ids: tuple[str, ...], examples: dict[str, Example], name: str) -> list[Example]:
    if not ids:
        raise EmptySplitError(f"{name} is empty")
    missing = [i for i in ids if i not in examples]
    if missing:
        raise DataError(f"{name} names utterances without features: {', '.join(missing[:5])}")
    return [examples[i] for i in ids]


def _check_classes(pool: list[Example], ledger: LabelLedger, name: str) -> None:
    classes = {ledger.read(e) for e in pool}
    if len(classes) < 2:
        raise DegenerateLabelsError(f"{name} holds a single class; both labels are needed")


# ── training steps ───────────────────────────────────────────────

def _batch_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _epoch_batches(pool: list[Example], batch_size: int, rng: np.random.Generator) -> list[list[Example]]:
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[k:k + batch_size]] for k in range(0, len(pool), batch_size)]


def _encode(model: DetectorGraph, batch: list[Example]):
    """Encode a batch in equal-length groups: [(members, frames, z), ...]."""
    groups: dict[int, list[Example]] = {}
    for example in batch:
        groups.setdefault(example.features.shape[0], []).append(example)
    encoded = []
    for members in groups.values():
        frames, z = model.encode(torch.stack([m.features for m in members]))
        encoded.append((members, frames, z))
    return encoded


def _label_loss(model: DetectorGraph, encoded, ledger: LabelLedger, scores: list, labels: list):
    loss, count = None, 0
    for members, frames, z in encoded:
        targets = torch.tensor([ledger.read(m) for m in members], dtype=torch.long)
        term = model.label_loss(frames, z, targets) * len(members)
        loss = term if loss is None else loss + term
        count += len(members)
        with torch.no_grad():
            scores.extend(model.scores_from(frames, z).tolist())
        labels.extend(targets.tolist())
    return loss / count


def _device_loss(model: DetectorGraph, encoded, lambda_: float):
    loss, count = None, 0
    for members, _, z in encoded:
        targets = torch.tensor([m.device.index for m in members], dtype=torch.long)
        term = cross_entropy(model.device_logits(z, lambda_), targets) * len(members)
        loss = term if loss is None else loss + term
        count += len(members)
    return loss / count


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def _train_pr_auc(scores: list, labels: list) -> float:
    try:
        return pr_auc(scores, labels).auc
    except NoPositivesError:
        return float("nan")


def _log_epoch(regime: Regime, row: dict, epochs: int) -> None:
    epoch = row["epoch"]
    level = logging.INFO if epoch == epochs or epoch % 10 == 0 else logging.DEBUG
    logger.log(level, "[%s] epoch %d/%d  L_y=%.4f  L_d=%.4f  lambda=%.3f  train PR-AUC=%.4f",
               regime.value, epoch, epochs, row["L_y"], row["L_d"], row["lambda"], row["train_pr_auc"])


def _supervised_epochs(model: DetectorGraph, pool: list[Example], params, config: TrainConfig,
                       ledger: LabelLedger, epochs: int, stream: int, regime: Regime) -> list[dict]:
    """Plain label-loss training of `params` over `pool`."""
    optimizer = Adam(params, lr=config.lr)
    rng = _batch_rng(config.seed, stream)
    history = []
    for epoch in range(1, epochs + 1):
        losses, scores, labels = [], [], []
        for step, batch in enumerate(_epoch_batches(pool, config.batch_size, rng)):
            optimizer.zero_grad()
            loss = _label_loss(model, _encode(model, batch), ledger, scores, labels)
            _check_finite(loss, epoch, step)
            loss.backward()
            gradient_clip([p for _, p in params], config.clip_norm)
            optimizer.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "L_y": float(np.mean(losses)), "L_d": float("nan"),
               "lambda": 0.0, "train_pr_auc": _train_pr_auc(scores, labels)}
        _log_epoch(regime, row, epochs)
        history.append(row)
    return history


def _result(model: DetectorGraph, config: TrainConfig, history: list[dict], ledger: LabelLedger) -> TrainResult:
    return TrainResult(model, config, pd.DataFrame(history, columns=METRICS_COLUMNS), ledger.as_dict())


def _new_model(config: TrainConfig, pool: list[Example]) -> DetectorGraph:
    """Fresh detector with its input scaler fitted on the features of `pool` (labels are not read)."""
    model = DetectorGraph(config.network(), seed=config.seed)
    model.fit_input_scaler([e.features for e in pool])
    logger.info("Built %s detector %s (seed %d).", config.model_kind.value, model.describe(), config.seed)
    return model


# ── regimes ──────────────────────────────────────────────────────

def train_source_only(config: TrainConfig, split: DomainSplit, examples: dict[str, Example]) -> TrainResult:
    """Baseline 1: label loss on source_train; the device head keeps its initial weights."""
    config = config.model_copy(update={"regime": Regime.SOURCE_ONLY})
    ledger = LabelLedger()
    pool = _pool(split.source_train, examples, "source_train")
    _check_classes(pool, ledger, "source_train")
    model = _new_model(config, pool)
    history = _supervised_epochs(model, pool, model.predictor_parameters(), config, ledger,
                                 config.epochs, _SOURCE_STREAM, config.regime)
    return _result(model, config, history, ledger)


def train_target_only(config: TrainConfig, split: DomainSplit, examples: dict[str, Example]) -> TrainResult:
    """Baseline 2: label loss on the labeled target_adapt set only."""
    config = config.model_copy(update={"regime": Regime.TARGET_ONLY})
    ledger = LabelLedger()
    pool = _pool(split.target_adapt, examples, "target_adapt")
    _check_classes(pool, ledger, "target_adapt")
    model = _new_model(config, pool)
    history = _supervised_epochs(model, pool, model.predictor_parameters(), config, ledger,
                                 config.epochs, _SOURCE_STREAM, config.regime)
    return _result(model, config, history, ledger)


def train_frozen_finetune(config: TrainConfig, split: DomainSplit, examples: dict[str, Example],
                          pretrained: DetectorGraph | None = None) -> TrainResult:
    """
    Baseline 3: copy a source-only model, freeze its encoder and refit the
    label head on target_adapt for `finetune_epochs` (default: `epochs`).
    """
    if pretrained is None:
        raise MissingPretrainedError("frozen fine-tuning needs a pretrained source-only model")
    config = config.model_copy(update={"regime": Regime.FROZEN_FINETUNE})
    if pretrained.config.input_dim != config.network().input_dim:
        raise ConfigError(
            f"pretrained model expects {pretrained.config.input_dim} input dims, "
            f"config gives {config.network().input_dim}"
        )
    ledger = LabelLedger()
    pool = _pool(split.target_adapt, examples, "target_adapt")
    _check_classes(pool, ledger, "target_adapt")

    model = copy.deepcopy(pretrained)
    before = parameter_checksum(model.encoder_parameters())
    for _, p in model.encoder_parameters():
        p.requires_grad_(False)
    epochs = config.epochs if config.finetune_epochs is None else config.finetune_epochs
    try:
        history = _supervised_epochs(model, pool, model.label_parameters(), config, ledger,
                                     epochs, _FINETUNE_STREAM, config.regime)
    finally:
        for _, p in model.encoder_parameters():
            p.requires_grad_(True)
    if parameter_checksum(model.encoder_parameters()) != before:
        raise NumericError("encoder parameters changed during frozen fine-tuning")
    return _result(model, config, history, ledger)


def train_dat(config: TrainConfig, split: DomainSplit, examples: dict[str, Example]) -> TrainResult:
    """
    Domain-adversarial training.

    Each step takes `batch_size` source utterances in epoch order and as many
    target_adapt utterances drawn with replacement from an independent stream.
    L_y covers the source half (and the target half for dat-sup); L_d covers
    both halves with their true device tags. Predictor and device head have
    separate Adam states and are clipped separately.
    """
    if not config.regime.adversarial:
        raise ConfigError(f"train_dat cannot run regime {config.regime.value}")
    supervised = config.regime is Regime.DAT_SUPERVISED
    ledger = LabelLedger()
    source = _pool(split.source_train, examples, "source_train")
    target = _pool(split.target_adapt, examples, "target_adapt")
    _check_classes(source, ledger, "source_train")
    if not supervised:
        target = hide_labels(target)

    model = _new_model(config, source)
    predictor_params = model.predictor_parameters()
    adversary_params = model.adversary_parameters()
    predictor = Adam(predictor_params, lr=config.lr)
    adversary = Adam(adversary_params, lr=config.lr)
    source_rng = _batch_rng(config.seed, _SOURCE_STREAM)
    target_rng = _batch_rng(config.seed, _TARGET_STREAM)

    steps_per_epoch = math.ceil(len(source) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    global_step = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        label_losses, device_losses, scores, labels = [], [], [], []
        lambda_ = 0.0
        for step, batch in enumerate(_epoch_batches(source, config.batch_size, source_rng)):
            picks = target_rng.integers(0, len(target), size=len(batch))
            target_batch = [target[int(i)] for i in picks]
            lambda_ = lambda_schedule(global_step / max(1, total_steps - 1), config.lambda_spec)

            predictor.zero_grad()
            adversary.zero_grad()
            source_encoded = _encode(model, batch)
            target_encoded = _encode(model, target_batch)
            labeled = source_encoded + target_encoded if supervised else source_encoded
            label_loss = _label_loss(model, labeled, ledger, scores, labels)
            device_loss = _device_loss(model, source_encoded + target_encoded, lambda_)
            loss = label_loss + device_loss
            _check_finite(loss, epoch, step)
            loss.backward()
            gradient_clip([p for _, p in predictor_params], config.clip_norm)
            gradient_clip([p for _, p in adversary_params], config.clip_norm)
            predictor.step()
            adversary.step()

            label_losses.append(label_loss.item())
            device_losses.append(device_loss.item())
            global_step += 1
        row = {"epoch": epoch, "L_y": float(np.mean(label_losses)), "L_d": float(np.mean(device_losses)),
               "lambda": lambda_, "train_pr_auc": _train_pr_auc(scores, labels)}
        _log_epoch(config.regime, row, config.epochs)
        history.append(row)

    if not supervised and ledger.target_reads:
        raise LabelLeakError(f"{ledger.target_reads} target labels read during unsupervised DAT")
    return _result(model, config, history, ledger)


def run_regime(config: TrainConfig, split: DomainSplit, examples: dict[str, Example],
               pretrained: DetectorGraph | None = None) -> TrainResult:
    """Dispatch on config.regime; frozen-finetune trains its own source-only model when none is given."""
    logger.info("─" * 60)
    logger.info("Training %s (%s, seed %d).", config.regime.value, config.features.label(), config.seed)
    if config.regime is Regime.SOURCE_ONLY:
        return train_source_only(config, split, examples)
    if config.regime is Regime.TARGET_ONLY:
        return train_target_only(config, split, examples)
    if config.regime is Regime.FROZEN_FINETUNE:
        if pretrained is None:
            pretrained = train_source_only(config, split, examples).model
        return train_frozen_finetune(config, split, examples, pretrained)
    return train_dat(config, split, examples)


# ── device probes ────────────────────────────────────────────────

def embeddings(model: DetectorGraph, examples: list[Example]) -> np.ndarray:
    """Utterance embeddings z (N, E) in the order of `examples`."""
    rows = {}
    with torch.no_grad():
        for members, _, z in _encode(model, examples):
            for member, vector in zip(members, z):
                rows[id(member)] = vector.numpy()
    return np.stack([rows[id(e)] for e in examples])


def device_probe_accuracy(model: DetectorGraph, examples: list[Example], seed: int = 0) -> float:
    """Cross-validated accuracy of a fresh linear device probe on frozen embeddings."""
    devices = np.array([e.device.index for e in examples])
    return linear_probe_accuracy(embeddings(model, examples), devices, seed)


def train_device_head(model: DetectorGraph, examples: list[Example], epochs: int = 200,
                      lr: float = 1e-2) -> float:
    """Fit only the device head on frozen embeddings (full batch); returns its training accuracy."""
    z = torch.as_tensor(embeddings(model, examples), dtype=DTYPE)
    targets = torch.tensor([e.device.index for e in examples], dtype=torch.long)
    params = model.adversary_parameters()
    optimizer = Adam(params, lr=lr)
    for _ in range(epochs):
        optimizer.zero_grad()
        loss = cross_entropy(model.device_logits(z, 1.0, reverse=False), targets)
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        predicted = model.device_logits(z, 1.0, reverse=False).argmax(dim=1)
    return float((predicted == targets).double().mean())
