"""Fine-tuning loop for the attention pooling layer.

Only the tuned layer's parameters move; the frozen layer and the
classifier are read-only throughout. Training minimizes cross-entropy of
the tuned layer's pooled features against the classifier, with AdamW and
cosine-annealed learning rate. Every ``eval_every`` steps the blended
(deployment-path) validation accuracy is measured and the best checkpoint
is retained; the returned report restores those best weights.

Batches are drawn by cyclic shuffled epochs over the few-shot training
set, reshuffled per epoch with the library's deterministic PRNG, so a run
is fully reproducible from its config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attnpool import AttnPoolParams, attn_backward_batch, attn_forward_batch
from .errors import ConfigError, DimensionError
from .inference import Classifier, class_logits_backward, class_logits_batch, \
    predict_batch
from .kernels import cross_entropy, cross_entropy_backward
from .prng import SplitMix64, shuffled


@dataclass
class TrainConfig:
    iterations: int = 12_800
    batch_size: int = 8
    lr_grid: tuple = (1e-4, 1e-5, 1e-6, 1e-7)
    wd_grid: tuple = (0.0, 0.001, 1e-5)
    eval_every: int = 100
    beta: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: Optional[int] = None  # eval rounds without improvement; None = run full

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not self.lr_grid or not self.wd_grid:
            raise ConfigError("grids must be nonempty")


@dataclass
class OptimState:
    """Per-parameter AdamW moments keyed like AttnPoolParams.tensors()."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: AttnPoolParams) -> "OptimState":
        zeros = {k: np.zeros_like(x) for k, x in params.tensors().items()}
        return cls(m=zeros, v={k: x.copy() for k, x in zeros.items()})


@dataclass
class TrainReport:
    best_val_accuracy: float
    lr: float
    wd: float
    best_params: AttnPoolParams
    best_step: int
    history: list = field(default_factory=list)  # (step, val_acc, train_loss)

    def to_json(self) -> dict:
        return {
            "best_val_accuracy": self.best_val_accuracy,
            "lr": self.lr,
            "wd": self.wd,
            "best_step": self.best_step,
            "history": [
                {"step": s, "val_accuracy": a, "train_loss": l}
                for s, a, l in self.history
            ],
        }


def cosine_lr(t: int, total: int, eta_max: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from eta_max (t=0) to eta_min (t=total)."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / total))


def adamw_step(params: AttnPoolParams, grads, state: OptimState,
               lr: float, wd: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place on params/state."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    p_tensors = params.tensors()
    g_tensors = grads.tensors() if hasattr(grads, "tensors") else grads
    for name, theta in p_tensors.items():
        g = g_tensors[name]
        if g.shape != theta.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {theta.shape} "
                f"for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * theta)


@dataclass
class FewShotData:
    """Preloaded feature arrays for one few-shot episode."""

    train_maps: np.ndarray   # (n_train, HW, C)
    train_labels: np.ndarray
    val_maps: np.ndarray
    val_labels: np.ndarray

    @classmethod
    def from_manifest(cls, manifest, fewshot) -> "FewShotData":
        tm, tl = manifest.load_arrays(fewshot.train_indices())
        vm, vl = manifest.load_arrays(fewshot.val_indices())
        return cls(tm, tl, vm, vl)


def _train_loss_and_grads(tuned, maps, labels, clf):
    pooled = attn_forward_batch(tuned, maps)
    logits = class_logits_batch(pooled, clf)
    loss = cross_entropy(logits, labels)
    g_logits = cross_entropy_backward(logits, labels)
    g_pooled = class_logits_backward(pooled, clf, g_logits)
    grads = attn_backward_batch(tuned, maps, g_pooled)
    return loss, grads


def train_safe(data: FewShotData, frozen: AttnPoolParams, clf: Classifier,
               cfg: TrainConfig, lr: Optional[float] = None,
               wd: Optional[float] = None,
               init: Optional[AttnPoolParams] = None) -> TrainReport:
    """Fine-tune a copy of the frozen layer on a few-shot episode.

    ``lr``/``wd`` default to the first entries of the config grids. The
    tuned layer starts as an exact copy of the frozen layer unless an
    explicit ``init`` is given.
    """
    if data.train_maps.shape[0] == 0:
        raise ConfigError("few-shot training set is empty")
    lr = cfg.lr_grid[0] if lr is None else lr
    wd = cfg.wd_grid[0] if wd is None else wd
    tuned = (frozen if init is None else init).copy()
    state = OptimState.for_params(tuned)
    order_rng = SplitMix64(cfg.seed)

    def val_accuracy(p):
        preds = predict_batch(data.val_maps, frozen, p, clf, cfg.beta)
        return float(np.mean(preds == data.val_labels))

    best_acc = val_accuracy(tuned)
    best_params = tuned.copy()
    best_step = 0
    history = [(0, best_acc, None)]
    stale_rounds = 0

    n_train = data.train_maps.shape[0]
    epoch = []
    for step in range(1, cfg.iterations + 1):
        batch_idx = []
        while len(batch_idx) < cfg.batch_size:
            if not epoch:
                epoch = shuffled(range(n_train), order_rng)
            batch_idx.append(epoch.pop(0))
        maps = data.train_maps[batch_idx]
        labels = data.train_labels[batch_idx]

        loss, grads = _train_loss_and_grads(tuned, maps, labels, clf)
        step_lr = cosine_lr(step - 1, cfg.iterations, lr)
        adamw_step(tuned, grads, state, step_lr, wd,
                   cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

        if step % cfg.eval_every == 0 or step == cfg.iterations:
            acc = val_accuracy(tuned)
            history.append((step, acc, loss))
            if acc > best_acc:
                best_acc = acc
                best_params = tuned.copy()
                best_step = step
                stale_rounds = 0
            else:
                stale_rounds += 1
                if cfg.patience is not None and stale_rounds >= cfg.patience:
                    break

    return TrainReport(
        best_val_accuracy=best_acc, lr=lr, wd=wd,
        best_params=best_params, best_step=best_step, history=history,
    )


def grid_search(data: FewShotData, frozen: AttnPoolParams, clf: Classifier,
                cfg: TrainConfig) -> TrainReport:
    """Run train_safe for every (lr, wd) pair; keep the first best by
    validation accuracy (grid order breaks ties)."""
    best = None
    for lr in cfg.lr_grid:
        for wd in cfg.wd_grid:
            report = train_safe(data, frozen, clf, cfg, lr=lr, wd=wd)
            if best is None or report.best_val_accuracy > best.best_val_accuracy:
                best = report
    return best
