"""
Evaluation metrics.
PR curves with the average-precision area, seed aggregation, and the Welch
t-test used to compare regimes.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import DataError

logger = logging.getLogger(__name__)


class NoPositivesError(DataError, ValueError):
    pass


class LengthMismatchError(DataError, ValueError):
    pass


@dataclass
class PRCurve:
    points: list[tuple[float, float]]
    auc: float
    n_positive: int
    n_negative: int
    thresholds: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "auc": round(self.auc, 6),
            "n_pos": self.n_positive,
            "n_neg": self.n_negative,
        }


@dataclass
class SeedSummary:
    values: list[float]
    mean: float
    std: float

    def as_dict(self) -> dict:
        return {"values": self.values, "mean": self.mean, "std": self.std, "n": len(self.values)}


class WelchResult(NamedTuple):
    statistic: float
    dof: float
    p_value: float


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> PRCurve:
    """
    Average-precision area under the PR curve.

    Scores are sorted descending and every distinct score is one threshold,
    so ties move together. Area = sum over thresholds of
    (recall gain) x (precision at that threshold). Label 1 is positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise LengthMismatchError(f"{scores.size} scores vs {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise NoPositivesError("PR-AUC needs at least one positive label")
    n_neg = int(labels.size - n_pos)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores, sorted_labels = scores[order], labels[order]
    # last index of each tie group
    boundaries = np.flatnonzero(np.diff(sorted_scores)) if sorted_scores.size > 1 else np.array([], int)
    group_ends = np.append(boundaries, sorted_scores.size - 1)

    true_pos = np.cumsum(sorted_labels == 1)[group_ends]
    predicted = group_ends + 1
    recall = true_pos / n_pos
    precision = true_pos / predicted

    auc = 0.0
    previous_recall = 0.0
    for r, p in zip(recall, precision):
        auc += (r - previous_recall) * p
        previous_recall = r

    points = [(float(r), float(p)) for r, p in zip(recall, precision)]
    return PRCurve(
        points=points,
        auc=float(min(1.0, max(0.0, auc))),
        n_positive=n_pos,
        n_negative=n_neg,
        thresholds=[float(s) for s in sorted_scores[group_ends]],
    )


def aggregate_seeds(runs: Sequence[float]) -> SeedSummary:
    """Mean and sample standard deviation across per-seed PR-AUCs."""
    values = [float(v) for v in runs]
    if not values:
        raise DataError("no runs to aggregate")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return SeedSummary(values=values, mean=mean, std=std)


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Two-sided unpaired Welch t-test; p from the Student t survival function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("Welch t-test needs at least two values per sample")

    var_a = a.var(ddof=1) / a.size
    var_b = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    pooled = var_a + var_b

    if pooled == 0.0:
        # both samples constant
        if diff == 0.0:
            return WelchResult(0.0, float(a.size + b.size - 2), 1.0)
        return WelchResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0)

    t_stat = diff / math.sqrt(pooled)
    dof = pooled ** 2 / (var_a ** 2 / (a.size - 1) + var_b ** 2 / (b.size - 1))
    p_value = float(2.0 * stats.t.sf(abs(t_stat), dof))
    return WelchResult(float(t_stat), float(dof), min(1.0, p_value))


def linear_probe_accuracy(features: np.ndarray, targets: np.ndarray, seed: int = 0) -> float:
    """Cross-validated accuracy of a standardized logistic regression."""
    targets = np.asarray(targets).astype(int)
    counts = np.bincount(targets)
    if counts.size < 2 or int(counts.min()) < 2:
        raise DataError("linear probe needs at least two examples per class")
    folds = StratifiedKFold(n_splits=min(5, int(counts.min())), shuffle=True, random_state=seed)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    return float(np.mean(cross_val_score(probe, np.asarray(features), targets, cv=folds)))


# ── export ───────────────────────────────────────────────────────

def write_curve_csv(path: str, curve: PRCurve) -> None:
    frame = pd.DataFrame(curve.points, columns=["recall", "precision"])
    frame.to_csv(path, index=False)


def write_summary(path: str, curve: PRCurve, seeds: SeedSummary | None = None, **extra) -> dict:
    summary = curve.summary()
    if seeds is not None:
        summary["seeds"] = seeds.as_dict()
    summary.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.info("PR-AUC %.4f (%d pos / %d neg) -> %s", curve.auc, curve.n_positive,
                curve.n_negative, path)
    return summary
