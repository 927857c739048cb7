"""Scream / non-scream decisions and detection metrics.

Scream is the positive class everywhere. Two detectors are provided: a
plain RMS threshold (the naive baseline) and a logistic model trained with
class-weighted cross-entropy on standardized feature vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .audio_io import AudioClip
from .errors import DimensionMismatch, EmptyClip, LengthMismatch, SingleClassData

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    config_fingerprint: str = ""
    losses: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "mean": self.feature_mean.tolist(),
            "std": self.feature_std.tolist(),
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LogisticModel":
        dim = int(doc["dim"])
        w = np.asarray(doc["weights"], dtype=float)
        mean = np.asarray(doc["mean"], dtype=float)
        std = np.asarray(doc["std"], dtype=float)
        if not (w.shape == mean.shape == std.shape == (dim,)):
            raise DimensionMismatch(
                f"model declares dim={dim} but has {w.shape[0]} weights, "
                f"{mean.shape[0]} means, {std.shape[0]} stds"
            )
        if np.any(std <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("model has non-positive std or non-finite weights")
        return cls(w, float(doc["bias"]), mean, std, str(doc.get("config_fingerprint", "")))


def save_model(model: LogisticModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=2) + "\n")


def load_model(path: str | Path, expected_dim: int | None = None) -> LogisticModel:
    model = LogisticModel.from_json(json.loads(Path(path).read_text()))
    if expected_dim is not None and model.dim != expected_dim:
        raise DimensionMismatch(f"model dim {model.dim} != feature dim {expected_dim}")
    return model


@dataclass(frozen=True)
class DetectionResult:
    window_index: int
    start_s: float
    end_s: float
    score: float
    is_scream: bool
    detector_name: str
    threshold: float = DEFAULT_THRESHOLD


def _class_weights(labels: np.ndarray, class_weights) -> tuple[float, float]:
    if isinstance(class_weights, str):
        if class_weights != "auto":
            raise ValueError(f"unknown class weighting {class_weights!r}")
        n = labels.shape[0]
        n1 = int(labels.sum())
        return n / (2.0 * (n - n1)), n / (2.0 * n1)
    w0, w1 = (float(w) for w in class_weights)
    if w0 <= 0 or w1 <= 0:
        raise ValueError("class weights must be positive")
    return w0, w1


def weighted_bce(z: np.ndarray, labels: np.ndarray, sample_w: np.ndarray) -> float:
    # log(1 + e^-z) for y=1 and log(1 + e^z) for y=0, computed stably
    losses = np.logaddexp(0.0, np.where(labels == 1, -z, z))
    return float(np.sum(sample_w * losses) / labels.shape[0])


def train_logistic(
    features: Sequence[np.ndarray],
    labels: Sequence[int],
    epochs: int = 500,
    lr: float = 0.1,
    class_weights="auto",
    config_fingerprint: str = "",
) -> LogisticModel:
    """Full-batch gradient descent on class-weighted binary cross-entropy.

    Features are standardized with the training mean/std; constant features
    get std 1 and a weight pinned to zero. Parameters start at zero, so the
    result is deterministic.

    Args:
        features: equal-length feature vectors.
        labels: 0 (non-scream) or 1 (scream) per vector.
        class_weights: ``"auto"`` for ``N / (2 N_c)``, or an explicit (w0, w1).
    """
    y = np.asarray(labels, dtype=int)
    if len({np.shape(f) for f in features}) > 1:
        raise DimensionMismatch("feature vectors differ in length")
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} feature rows vs {y.shape[0]} labels")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise SingleClassData("training data needs both classes")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    active = std > 0
    std = np.where(active, std, 1.0)
    Z = (X - mean) / std

    w0, w1 = _class_weights(y, class_weights)
    sample_w = np.where(y == 1, w1, w0)
    n = y.shape[0]
    w = np.zeros(X.shape[1])
    b = 0.0
    losses = []
    for _ in range(epochs):
        z = Z @ w + b
        losses.append(weighted_bce(z, y, sample_w))
        err = sample_w * (expit(z) - y)
        grad_w = (Z.T @ err) / n
        grad_b = err.sum() / n
        w = np.where(active, w - lr * grad_w, 0.0)
        b -= lr * grad_b
    losses.append(weighted_bce(Z @ w + b, y, sample_w))
    return LogisticModel(w, float(b), mean, std, config_fingerprint, tuple(losses))


def predict(model: LogisticModel, features: np.ndarray) -> float:
    x = np.asarray(features, dtype=float)
    if x.shape != (model.dim,):
        raise DimensionMismatch(f"expected {model.dim} features, got {x.shape}")
    return float(expit(((x - model.feature_mean) / model.feature_std) @ model.weights + model.bias))


def rms(clip: AudioClip) -> float:
    return float(np.sqrt(np.mean(clip.samples ** 2)))


def energy_detect(clip: AudioClip, rms_threshold: float, window_index: int = 0, start_s: float = 0.0) -> DetectionResult:
    """Flag a clip whose RMS reaches ``rms_threshold``."""
    if len(clip) == 0:
        raise EmptyClip("cannot measure energy of an empty clip")
    if rms_threshold <= 0:
        raise ValueError("rms threshold must be positive")
    level = rms(clip)
    return DetectionResult(
        window_index=window_index,
        start_s=start_s,
        end_s=start_s + clip.duration_s,
        score=min(level / rms_threshold, 1.0),
        is_scream=level >= rms_threshold,
        detector_name="energy",
        threshold=1.0,
    )


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    scream: ClassMetrics
    non_scream: ClassMetrics
    eer: float | None
    eer_threshold: float | None
    threshold: float

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "accuracy": self.accuracy,
            "scream": vars(self.scream),
            "non_scream": vars(self.non_scream),
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "threshold": self.threshold,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ClassMetrics(p, r, f1)


def report_from_counts(tp: int, fp: int, fn: int, tn: int, threshold: float = DEFAULT_THRESHOLD,
                       eer: float | None = None, eer_threshold: float | None = None) -> MetricsReport:
    return MetricsReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        accuracy=(tp + tn) / (tp + tn + fp + fn),
        scream=class_metrics(tp, fp, fn),
        # roles swapped: non-scream as the positive class
        non_scream=class_metrics(tn, fn, fp),
        eer=eer, eer_threshold=eer_threshold, threshold=threshold,
    )


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.size == 0:
        raise ValueError("need at least one sample")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    eer = eer_t = None
    if 0 < y.sum() < y.size:
        eer, eer_t = compute_eer(s, y)
    return report_from_counts(tp, fp, fn, tn, threshold, eer, eer_t)


def compute_eer(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Equal error rate over a sweep of every distinct score as threshold.

    At the threshold minimizing ``|FPR - FNR|`` (smallest threshold on ties)
    returns ``((FPR + FNR) / 2, threshold)``.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassData("EER needs both classes")

    thresholds = np.unique(s)
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # samples strictly below each threshold are predicted negative
    below = np.searchsorted(s_sorted, thresholds, side="left")
    pos_below = np.concatenate([[0], np.cumsum(y_sorted)])[below]
    neg_below = below - pos_below
    fn = pos_below
    fp = n_neg - neg_below
    # |fp/n_neg - fn/n_pos| compared exactly in integers
    gap = np.abs(fp * n_pos - fn * n_neg)
    k = int(np.argmin(gap))  # thresholds ascending, so argmin picks the smallest on ties
    eer = (fp[k] / n_neg + fn[k] / n_pos) / 2.0
    return float(eer), float(thresholds[k])
