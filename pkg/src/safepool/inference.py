"""Residual-blended inference and evaluation.

The deployed prediction path blends the frozen pooling layer's output with
the fine-tuned layer's output as ``beta * pooled_frozen + pooled_tuned``
(coefficients beta and 1, not a convex combination), then scores classes.

By default the blended feature and the classifier rows are L2-normalized
and the cosine scores are multiplied by ``logit_scale`` (the pretrained
convention, and the convention the cache adapter's affinity kernel
assumes). ``normalize=False`` gives the raw unnormalized inner products.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attnpool import AttnPoolParams, DenseFeatureMap, attn_forward_batch
from .errors import ConfigError, DegenerateFeatureError, DimensionError


@dataclass
class Classifier:
    """Text-derived class weight rows plus the logit-scale convention."""

    weights: np.ndarray  # (N, d_out)
    logit_scale: float = 100.0
    normalize: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ConfigError(f"classifier needs (N>=2, d) rows, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ConfigError("classifier rows must be finite")
        if self.normalize:
            w = w / np.linalg.norm(w, axis=1, keepdims=True)
        self.weights = w

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class BlendConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ConfigError("beta must be finite and >= 0")


def blend_batch(maps: np.ndarray, frozen: AttnPoolParams,
                tuned: AttnPoolParams, beta: float) -> np.ndarray:
    """beta * frozen pooled + tuned pooled for a (B, HW, C) batch."""
    return beta * attn_forward_batch(frozen, maps) + attn_forward_batch(tuned, maps)


def blend(fmap: DenseFeatureMap, frozen: AttnPoolParams,
          tuned: AttnPoolParams, cfg: BlendConfig) -> np.ndarray:
    return blend_batch(fmap.values[None], frozen, tuned, cfg.beta)[0]


def class_logits_batch(feats: np.ndarray, clf: Classifier) -> np.ndarray:
    """(B, N) class scores for pooled features (B, d_out)."""
    feats = np.asarray(feats)
    if feats.shape[-1] != clf.weights.shape[1]:
        raise DimensionError(
            f"feature dim {feats.shape[-1]} != classifier dim "
            f"{clf.weights.shape[1]}")
    if clf.normalize:
        norms = np.linalg.norm(feats, axis=-1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateFeatureError(
                "zero-norm pooled feature cannot be normalized")
        feats = feats / norms
        return clf.logit_scale * (feats @ clf.weights.T)
    return feats @ clf.weights.T


def class_logits(feat: np.ndarray, clf: Classifier) -> np.ndarray:
    return class_logits_batch(np.asarray(feat)[None], clf)[0]


def class_logits_backward(feats: np.ndarray, clf: Classifier,
                          grad_logits: np.ndarray) -> np.ndarray:
    """Gradient of the logits map w.r.t. the pooled features (batch)."""
    feats = np.asarray(feats)
    g = grad_logits @ clf.weights
    if not clf.normalize:
        return g
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    unit = feats / norms
    radial = np.sum(g * unit, axis=-1, keepdims=True)
    return clf.logit_scale * (g - radial * unit) / norms


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: list
    predictions: list  # (sample index or path, label, predicted, top logit)
    n_samples: int = 0
    extras: dict = field(default_factory=dict)


def predict_batch(maps, frozen, tuned, clf, beta) -> np.ndarray:
    logits = class_logits_batch(blend_batch(maps, frozen, tuned, beta), clf)
    return np.argmax(logits, axis=1)  # ties -> lowest class index


def evaluate(maps: np.ndarray, labels: np.ndarray, frozen: AttnPoolParams,
             tuned: AttnPoolParams, clf: Classifier, beta: float = 0.5,
             sample_ids=None) -> EvalResult:
    """Top-1 accuracy of blended predictions over a sample array."""
    maps = np.asarray(maps)
    labels = np.asarray(labels)
    if maps.shape[0] == 0:
        raise ConfigError("cannot evaluate an empty split")
    logits = class_logits_batch(blend_batch(maps, frozen, tuned, beta), clf)
    preds = np.argmax(logits, axis=1)
    correct = preds == labels
    n = clf.n_classes
    per_class = []
    for c in range(n):
        mask = labels == c
        per_class.append(float(np.mean(correct[mask])) if np.any(mask) else None)
    if sample_ids is None:
        sample_ids = list(range(len(labels)))
    predictions = [
        (sample_ids[i], int(labels[i]), int(preds[i]),
         float(logits[i, preds[i]]))
        for i in range(len(labels))
    ]
    return EvalResult(
        accuracy=float(np.mean(correct)),
        per_class_accuracy=per_class,
        predictions=predictions,
        n_samples=len(labels),
    )


def write_prediction_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label", "predicted", "top1_logit"])
        for row in result.predictions:
            writer.writerow(row)
