"""Key-value cache adapter over pooled few-shot features.

Keys are L2-normalized pooled features of the few-shot training set
(through the frozen layer, or through the residual blend of frozen and
tuned layers); values are one-hot labels. At query time the class scores
add ``alpha * phi(affinity) @ values`` to the ordinary classifier logits,
where affinity is the cosine between the normalized query feature and the
keys and ``phi(x) = exp(-gamma * (1 - x))``.

Keys are frozen after construction; no key fine-tuning is performed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attnpool import AttnPoolParams, attn_forward_batch
from .errors import ConfigError, DimensionError
from .inference import Classifier, blend_batch, class_logits_batch
from .kernels import l2_normalize


@dataclass
class CacheModel:
    keys: np.ndarray     # (N*K, d_out), unit rows
    values: np.ndarray   # (N*K, N), one-hot rows
    alpha: float = 1.0
    gamma: float = 5.5
    mode: str = "original"   # which pooling path built the keys
    beta: float = 0.5        # blend ratio used when mode == "blended"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.keys.shape[0] != self.values.shape[0]:
            raise DimensionError("keys and values row counts differ")
        norms = np.linalg.norm(self.keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigError("cache keys must have unit norm")
        v = self.values
        if np.any(np.abs(v.sum(axis=1) - 1.0) > 0) or not np.all((v == 0) | (v == 1)):
            raise ConfigError("cache values must be one-hot rows")

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]


def phi(x, gamma: float):
    """exp(-gamma * (1 - x)), elementwise; maps [-1, 1] into (0, 1]."""
    return np.exp(-gamma * (1.0 - np.asarray(x, dtype=np.float64)))


def build_cache(train_maps: np.ndarray, labels: np.ndarray, mode: str,
                frozen: AttnPoolParams, tuned: AttnPoolParams = None,
                beta: float = 0.5, alpha: float = 1.0,
                gamma: float = 5.5) -> CacheModel:
    """Pool the few-shot training features into cache keys.

    mode "original": keys through the frozen layer only. mode "blended":
    keys through beta * frozen + tuned. Requires an equal shot count per
    class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    if len(set(counts.tolist())) != 1:
        raise ConfigError(f"unbalanced shots per class: {counts.tolist()}")
    if mode == "original":
        feats = attn_forward_batch(frozen, train_maps)
    elif mode == "blended":
        if tuned is None:
            raise ConfigError("blended mode needs the tuned layer")
        feats = blend_batch(train_maps, frozen, tuned, beta)
    else:
        raise ConfigError(f"unknown cache mode {mode!r}")
    keys = l2_normalize(feats)
    n = int(labels.max()) + 1
    values = np.zeros((len(labels), n), dtype=keys.dtype)
    values[np.arange(len(labels)), labels] = 1.0
    return CacheModel(keys=keys, values=values, alpha=alpha, gamma=gamma,
                      mode=mode, beta=beta)


def safe_a_logits_batch(maps: np.ndarray, frozen: AttnPoolParams,
                        tuned: AttnPoolParams, beta: float,
                        cache: CacheModel, clf: Classifier) -> np.ndarray:
    """Cache-augmented class scores for a (B, HW, C) batch."""
    feats = blend_batch(maps, frozen, tuned, beta)
    base = class_logits_batch(feats, clf)
    if cache.alpha == 0.0:
        return base
    unit = l2_normalize(feats)
    affinity = unit @ cache.keys.T
    term = (cache.alpha * (phi(affinity, cache.gamma) @ cache.values)).astype(base.dtype)
    return base + term


def safe_a_logits(fmap, frozen, tuned, beta, cache, clf) -> np.ndarray:
    maps = fmap.values[None] if hasattr(fmap, "values") else np.asarray(fmap)[None]
    return safe_a_logits_batch(maps, frozen, tuned, beta, cache, clf)[0]


DEFAULT_ALPHA_GRID = (0.5, 1.0, 2.0, 5.0)
DEFAULT_GAMMA_GRID = (1.0, 3.0, 5.5, 10.0)


def tune_cache_hparams(val_maps, val_labels, frozen, tuned, beta,
                       cache: CacheModel, clf: Classifier,
                       alpha_grid=DEFAULT_ALPHA_GRID,
                       gamma_grid=DEFAULT_GAMMA_GRID):
    """Pick (alpha, gamma) maximizing validation accuracy; first-best wins.

    Returns (alpha, gamma, val_accuracy). The cache's stored alpha/gamma
    are ignored during the sweep.
    """
    if not alpha_grid or not gamma_grid:
        raise ConfigError("hyperparameter grids must be nonempty")
    val_labels = np.asarray(val_labels)
    feats = blend_batch(val_maps, frozen, tuned, beta)
    base = class_logits_batch(feats, clf)
    affinity = l2_normalize(feats) @ cache.keys.T
    best = None
    for alpha in alpha_grid:
        for gamma in gamma_grid:
            term = (alpha * (phi(affinity, gamma) @ cache.values)).astype(base.dtype)
            logits = base + term
            acc = float(np.mean(np.argmax(logits, axis=1) == val_labels))
            if best is None or acc > best[2]:
                best = (alpha, gamma, acc)
    return best


def save_cache(dirpath, cache: CacheModel) -> None:
    from .store import write_tensor

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "keys.tf", cache.keys)
    write_tensor(d / "values.tf", cache.values)
    sidecar = {"alpha": cache.alpha, "gamma": cache.gamma,
               "mode": cache.mode, "beta": cache.beta}
    (d / "cache.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def load_cache(dirpath) -> CacheModel:
    from .store import read_tensor

    d = Path(dirpath)
    sidecar = json.loads((d / "cache.json").read_text())
    return CacheModel(
        keys=read_tensor(d / "keys.tf"),
        values=read_tensor(d / "values.tf"),
        alpha=sidecar["alpha"], gamma=sidecar["gamma"],
        mode=sidecar["mode"], beta=sidecar["beta"],
    )
