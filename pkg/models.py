"""
The three networks: BLSTM detector, per-frame MLP detector, and the device
classifier that sits behind the gradient reversal layer. DetectorGraph ties
an encoder (theta_z), a label predictor (theta_y) and a device head (theta_d)
together and turns frame outputs into one pathology score per utterance.
"""

import hashlib
import logging
from collections import OrderedDict
from enum import Enum

import numpy as np
import torch
from torch import nn
from pydantic import BaseModel, ConfigDict, Field

from dsp import FeatureConfig, FeatureMatrix
from errors import ConfigError, DataError
from netcore import (
    DTYPE, BiLstm, Dense, LayerKind, LayerSpec, ShapeMismatchError,
    cross_entropy, grl, load_checkpoint, mean_pool_time, relu, save_checkpoint, softmax,
)

logger = logging.getLogger(__name__)

PATHOLOGICAL_CLASS = 1
_MIN_INPUT_STD = 1e-8


class ModelKind(str, Enum):
    BLSTM = "blstm"
    MLP = "mlp"


class Scale(str, Enum):
    PAPER = "paper"
    DESK = "desk"
    CI = "ci"


# hidden sizes per scale: (blstm dense/lstm, mlp, device classifier)
_HIDDEN = {
    Scale.PAPER: (512, 300, 300),
    Scale.DESK: (64, 64, 64),
    Scale.CI: (16, 16, 16),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ModelKind = ModelKind.BLSTM
    input_dim: int = Field(..., ge=1)
    dense_hidden: int = Field(64, ge=1)
    lstm_hidden: int = Field(64, ge=1)
    lstm_layers: int = Field(2, ge=1)
    mlp_hidden: int = Field(64, ge=1)
    mlp_layers: int = Field(3, ge=1)
    device_hidden: int = Field(64, ge=1)
    device_layers: int = Field(3, ge=1)
    n_classes: int = Field(2, ge=2)
    n_devices: int = Field(2, ge=2)

    @classmethod
    def for_scale(cls, kind: ModelKind, input_dim: int, scale: Scale) -> "ModelConfig":
        blstm, mlp, device = _HIDDEN[Scale(scale)]
        return cls(kind=kind, input_dim=input_dim, dense_hidden=blstm, lstm_hidden=blstm,
                   mlp_hidden=mlp, device_hidden=device)

    @property
    def embedding_dim(self) -> int:
        return 2 * self.lstm_hidden if self.kind is ModelKind.BLSTM else self.mlp_hidden


def model_input_dim(kind: ModelKind, features: FeatureConfig) -> int:
    """BLSTM reads context-stacked frames; the MLP reads single frames."""
    return features.stacked_dims if kind is ModelKind.BLSTM else features.base_dims


def _generator(seed: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), stream]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


class BlstmEncoder(nn.Module):
    """Dense + ReLU, stacked BiLSTMs; returns top-layer frame outputs."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.input_layer = Dense(config.input_dim, config.dense_hidden, generator)
        layers = []
        in_dim = config.dense_hidden
        for _ in range(config.lstm_layers):
            layers.append(BiLstm(in_dim, config.lstm_hidden, generator))
            in_dim = 2 * config.lstm_hidden
        self.recurrent = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = relu(self.input_layer(x))
        for layer in self.recurrent:
            h = layer(h)
        return h


class MlpEncoder(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        dims = [config.input_dim] + [config.mlp_hidden] * config.mlp_layers
        self.layers = nn.ModuleList(Dense(a, b, generator) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.layers:
            h = relu(layer(h))
        return h


class DeviceClassifier(nn.Module):
    """GRL, then ReLU dense layers and a device softmax output."""

    def __init__(self, in_dim: int, hidden: int, layers: int, n_devices: int,
                 generator: torch.Generator):
        super().__init__()
        dims = [in_dim] + [hidden] * layers
        self.hidden_layers = nn.ModuleList(Dense(a, b, generator) for a, b in zip(dims[:-1], dims[1:]))
        self.output_layer = Dense(dims[-1], n_devices, generator)

    def forward(self, z: torch.Tensor, lambda_: float, reverse: bool = True) -> torch.Tensor:
        h = grl(z, lambda_) if reverse else z
        for layer in self.hidden_layers:
            h = relu(layer(h))
        return self.output_layer(h)


class DetectorGraph(nn.Module):
    """Encoder (theta_z), label predictor (theta_y) and device classifier (theta_d)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        if config.kind is ModelKind.BLSTM:
            self.encoder = BlstmEncoder(config, _generator(seed, 0))
        else:
            self.encoder = MlpEncoder(config, _generator(seed, 0))
        top = 2 * config.lstm_hidden if config.kind is ModelKind.BLSTM else config.mlp_hidden
        self.label_head = Dense(top, config.n_classes, _generator(seed, 1))
        self.device_head = DeviceClassifier(config.embedding_dim, config.device_hidden,
                                            config.device_layers, config.n_devices,
                                            _generator(seed, 2))
        # per-dimension input standardization; identity until fit_input_scaler runs
        self.register_buffer("input_mean", torch.zeros(config.input_dim, dtype=DTYPE))
        self.register_buffer("input_scale", torch.ones(config.input_dim, dtype=DTYPE))

    def fit_input_scaler(self, inputs) -> None:
        """Set the input mean and standard deviation from every frame of `inputs` ((T, D) arrays)."""
        rows = [torch.as_tensor(x, dtype=DTYPE) for x in inputs]
        for r in rows:
            if r.dim() != 2 or r.shape[1] != self.config.input_dim:
                raise ShapeMismatchError(
                    f"{self.config.kind.value} expects {self.config.input_dim} input dims, got {tuple(r.shape)}"
                )
        if not rows or sum(r.shape[0] for r in rows) == 0:
            raise DataError("no frames to fit the input scaler on")
        data = torch.cat(rows)
        std = data.std(dim=0, unbiased=False)
        with torch.no_grad():
            self.input_mean.copy_(data.mean(dim=0))
            self.input_scale.copy_(torch.where(std > _MIN_INPUT_STD, std, torch.ones_like(std)))

    def scaler_tensors(self):
        return [("input_mean", self.input_mean), ("input_scale", self.input_scale)]

    # ── forward pieces ──

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 3 or x.shape[1] == 0:
            raise DataError("expected a (batch, frames, dims) tensor with at least one frame")
        if x.shape[2] != self.config.input_dim:
            raise ShapeMismatchError(
                f"{self.config.kind.value} expects {self.config.input_dim} input dims, got {x.shape[2]}"
            )

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, D) -> (frame outputs (B, T, H), pooled embedding z (B, E))."""
        self._check_input(x)
        x = (x - self.input_mean) / self.input_scale
        frames = self.encoder(x)
        return frames, mean_pool_time(frames)

    def label_logits(self, frames: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """(B, 2) for the BLSTM, (B, T, 2) per frame for the MLP."""
        if self.config.kind is ModelKind.BLSTM:
            return self.label_head(z)
        return self.label_head(frames)

    def device_logits(self, z: torch.Tensor, lambda_: float, reverse: bool = True) -> torch.Tensor:
        return self.device_head(z, lambda_, reverse=reverse)

    def label_loss(self, frames: torch.Tensor, z: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        logits = self.label_logits(frames, z)
        if self.config.kind is ModelKind.BLSTM:
            return cross_entropy(logits, targets)
        steps = logits.shape[1]
        return cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.repeat_interleave(steps))

    def scores_from(self, frames: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Pathology probability per utterance (mean of frame probabilities for the MLP)."""
        probs = softmax(self.label_logits(frames, z))[..., PATHOLOGICAL_CLASS]
        if self.config.kind is ModelKind.MLP:
            probs = probs.mean(dim=-1)
        return probs

    def pathology_scores(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            frames, z = self.encode(x)
            return self.scores_from(frames, z)

    # ── parameter groups ──

    def encoder_parameters(self):
        return [("encoder." + n, p) for n, p in self.encoder.named_parameters()]

    def label_parameters(self):
        return [("label_head." + n, p) for n, p in self.label_head.named_parameters()]

    def predictor_parameters(self):
        return self.encoder_parameters() + self.label_parameters()

    def adversary_parameters(self):
        return [("device_head." + n, p) for n, p in self.device_head.named_parameters()]

    def layer_specs(self) -> list[LayerSpec]:
        specs = []
        for module in self.modules():
            spec = getattr(module, "spec", None)
            if isinstance(spec, LayerSpec):
                specs.append(spec)
        return specs

    def describe(self) -> dict:
        counts: dict[str, int] = {}
        for spec in self.layer_specs():
            counts[spec.kind.value] = counts.get(spec.kind.value, 0) + 1
        counts[LayerKind.GRL.value] = 1
        return counts


def to_batch(features: list[FeatureMatrix] | FeatureMatrix) -> torch.Tensor:
    """Stack equal-length feature matrices into a (B, T, D) float64 tensor."""
    if isinstance(features, FeatureMatrix):
        features = [features]
    lengths = {f.frames for f in features}
    if len(lengths) != 1:
        raise DataError(f"cannot batch utterances of different lengths {sorted(lengths)}")
    return torch.as_tensor(np.stack([f.data for f in features]), dtype=DTYPE)


def blstm_forward(model: DetectorGraph, features: FeatureMatrix) -> tuple[torch.Tensor, torch.Tensor]:
    """Embedding z (E,) and label logits (2,) for one context-stacked utterance."""
    if model.config.kind is not ModelKind.BLSTM:
        raise ConfigError("blstm_forward needs a BLSTM model")
    if features.frames == 0:
        raise DataError("empty feature matrix")
    frames, z = model.encode(to_batch(features))
    return z[0], model.label_logits(frames, z)[0]


def mlp_forward(model: DetectorGraph, features: FeatureMatrix) -> torch.Tensor:
    """Per-frame pathology probabilities (T,)."""
    if model.config.kind is not ModelKind.MLP:
        raise ConfigError("mlp_forward needs an MLP model")
    if features.frames == 0:
        raise DataError("empty feature matrix")
    with torch.no_grad():
        frames, z = model.encode(to_batch(features))
        return softmax(model.label_logits(frames, z))[0, :, PATHOLOGICAL_CLASS]


def mlp_utterance_score(frame_scores: torch.Tensor) -> float:
    if frame_scores.numel() == 0:
        raise DataError("no frame scores to aggregate")
    return float(frame_scores.mean())


def device_forward(model: DetectorGraph, z: torch.Tensor, lambda_: float) -> torch.Tensor:
    if z.shape[-1] != model.config.embedding_dim:
        raise ShapeMismatchError(
            f"device classifier expects {model.config.embedding_dim} dims, got {z.shape[-1]}"
        )
    return model.device_logits(z, lambda_)


def parameter_checksum(named_params) -> str:
    digest = hashlib.sha256()
    for name, p in named_params:
        digest.update(name.encode("utf-8"))
        digest.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return digest.hexdigest()


# ── checkpoints ──

def checkpoint_header(model: DetectorGraph, features: FeatureConfig, **extra) -> dict:
    header = {
        "model": model.config.model_dump(mode="json"),
        "features": features.model_dump(mode="json"),
        "seed": model.seed,
    }
    header.update(extra)
    return header


def model_tensors(model: DetectorGraph) -> "OrderedDict[str, torch.Tensor]":
    named = (model.encoder_parameters() + model.label_parameters() + model.adversary_parameters()
             + model.scaler_tensors())
    return OrderedDict((name, p.detach()) for name, p in named)


def save_model(path: str, model: DetectorGraph, features: FeatureConfig, **extra) -> bytes:
    return save_checkpoint(path, model_tensors(model), checkpoint_header(model, features, **extra))


def load_model(path: str, expected_features: FeatureConfig | None = None) -> tuple[DetectorGraph, dict]:
    """Rebuild a DetectorGraph from a DAVC checkpoint, refusing mismatched feature configs."""
    header, tensors = load_checkpoint(path)
    config = ModelConfig(**header["model"])
    stored_features = FeatureConfig(**header["features"])
    if expected_features is not None and expected_features != stored_features:
        raise ConfigError(
            f"checkpoint {path} was trained on {stored_features.label()}, "
            f"not {expected_features.label()}"
        )
    if config.input_dim != model_input_dim(config.kind, stored_features):
        raise ConfigError(f"checkpoint {path}: input dims disagree with its feature config")

    model = DetectorGraph(config, seed=header.get("seed", 0))
    named = dict(model.encoder_parameters() + model.label_parameters() + model.adversary_parameters()
                 + model.scaler_tensors())
    if set(named) != set(tensors):
        raise ConfigError(f"checkpoint {path}: parameter names do not match the model")
    with torch.no_grad():
        for name, value in tensors.items():
            target = named[name]
            if tuple(target.shape) != value.shape:
                raise ShapeMismatchError(f"{name}: checkpoint {value.shape} vs model {tuple(target.shape)}")
            target.copy_(torch.as_tensor(value, dtype=DTYPE))
    logger.info("Loaded %s model from %s.", config.kind.value, path)
    return model, header
