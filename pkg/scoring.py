"""
Utterance scoring with a trained detector.
The checkpoint is loaded lazily on first use and kept for later batches.
"""

import logging

import numpy as np
import torch

from dsp import FeatureConfig, FeatureMatrix
from errors import ConfigError
from models import DetectorGraph, load_model, to_batch

logger = logging.getLogger(__name__)

_model: DetectorGraph | None = None
_path: str | None = None


def _init_model(path: str, expected_features: FeatureConfig | None = None) -> None:
    """Load the checkpoint at `path` unless it is already the active one."""
    global _model, _path

    if _model is not None and _path == path:
        return
    _model, _ = load_model(path, expected_features)
    _path = path
    logger.info("Loaded %s detector from %s.", _model.config.kind.value, path)


def score_features(model: DetectorGraph, features: list[FeatureMatrix]) -> np.ndarray:
    """Pathology score per feature matrix, batching equal-length utterances."""
    if not features:
        return np.zeros(0)
    scores = np.empty(len(features))
    groups: dict[int, list[int]] = {}
    for i, fm in enumerate(features):
        groups.setdefault(fm.frames, []).append(i)
    for members in groups.values():
        batch = to_batch([features[i] for i in members])
        scores[members] = model.pathology_scores(batch).numpy()
    return scores


def score_batch(features: list[FeatureMatrix], labels: list[str] | None = None,
                devices: list[str] | None = None, checkpoint: str | None = None) -> list[dict]:
    """
    Score a batch of utterances.

    Returns list of {"utterance_id": str, "score": float, "label": str, "device": str}.
    """
    if not features:
        return []
    if checkpoint is not None:
        _init_model(checkpoint, features[0].config)
    if _model is None:
        raise ConfigError("no detector loaded; pass a checkpoint")

    with torch.no_grad():
        scores = score_features(_model, features)
    labels = labels or [""] * len(features)
    devices = devices or [""] * len(features)
    return [
        {"utterance_id": fm.utterance_id, "score": float(s), "label": label, "device": device}
        for fm, s, label, device in zip(features, scores, labels, devices)
    ]
