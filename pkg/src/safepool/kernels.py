"""Dense numeric kernels and their analytic backward rules.

All functions are pure: they never mutate their inputs and hold no state,
so they are safe to call concurrently. Arrays are plain numpy ndarrays in
float32 or float64; float64 is used on verification paths, float32 is the
runtime default elsewhere.

Softmax and cross-entropy are always max-stabilized so that finite inputs
can never produce NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

EPS_NORM = 1e-12


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [m x k] and b [k x n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} x {b.shape}"
        )
    return a @ b


def matmul_backward(a, b, grad_out):
    """VJP of matmul: returns (grad_a, grad_b)."""
    return grad_out @ b.T, a.T @ grad_out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction (shift invariant)."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """VJP of softmax_rows given its output y: y * (g - <g, y>)."""
    inner = np.sum(grad_out * y, axis=-1, keepdims=True)
    return y * (grad_out - inner)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def l2_normalize(v: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """v / max(||v||, eps). Near-zero vectors stay near zero instead of NaN."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def cosine_sim(u: np.ndarray, v: np.ndarray, eps: float = EPS_NORM) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 if either norm < eps.

    The zero-vector guard keeps degenerate feature cells from poisoning
    argmax-based matching.
    """
    u = np.asarray(u).ravel()
    v = np.asarray(v).ravel()
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < eps or nv < eps:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean over the batch of -log softmax(logits_b)[label_b]."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range [0, {n})")
    logp = log_softmax_rows(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def cross_entropy_backward(logits: np.ndarray, labels) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. logits: (softmax - onehot) / B."""
    logits = np.asarray(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None, :]
    labels = np.asarray(labels, dtype=np.int64).ravel()
    p = softmax_rows(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    p /= len(labels)
    return p[0] if squeeze else p


def mean_rows(x: np.ndarray) -> np.ndarray:
    """Mean over the leading (location) axis."""
    return np.mean(np.asarray(x), axis=0)


def mean_rows_backward(n_rows: int, grad_out: np.ndarray) -> np.ndarray:
    """VJP of mean_rows: broadcast grad_out / n to every row."""
    return np.broadcast_to(grad_out / n_rows, (n_rows,) + grad_out.shape).copy()
