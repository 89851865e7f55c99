"""Attention pooling over frozen dense feature maps.

The layer computes a query from the spatial mean of the feature map,
attends over the spatial locations with scaled dot-product attention
(optionally multi-head), and projects the weighted sum through an output
linear map. Two optional extensions match public pretrained checkpoints:
the mean token can itself be attendable (``include_mean_token``) and a
learned positional table can be added to the tokens before projection
(``pos_embed``, row 0 belongs to the mean token).

With one head, no mean token, and no positional table this reduces to the
plain scalar-head weighted sum.

Gradients with respect to every parameter are computed analytically
(``attn_backward``); the feature extractor is frozen, so no gradient with
respect to the input map is produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import softmax_rows

TENSOR_FIELDS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_c", "b_c")


@dataclass(frozen=True)
class DenseFeatureMap:
    """H x W x C grid of frozen extractor outputs, stored as (H*W, C) rows
    in row-major spatial order."""

    height: int
    width: int
    values: np.ndarray  # (H*W, C)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != self.height * self.width:
            raise DimensionError(
                f"feature map values must be ({self.height * self.width}, C), "
                f"got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "DenseFeatureMap":
        """Build from an (H, W, C) array."""
        grid = np.asarray(grid)
        if grid.ndim != 3:
            raise DimensionError(f"expected (H, W, C) grid, got {grid.shape}")
        h, w, c = grid.shape
        return cls(h, w, grid.reshape(h * w, c))

    def to_grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width, self.channels)


@dataclass
class AttnPoolParams:
    """All weights of one attention pooling layer.

    Shapes: w_q/w_k/w_v are (C, d_e), w_c is (d_e, d_out), biases match the
    output dims. ``heads`` must divide d_e. ``scale`` is the dot-product
    divisor; None selects sqrt(d_e / heads). ``pos_embed``, when present,
    has H*W + 1 rows of width C, row 0 for the mean token.
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_c: np.ndarray
    b_c: np.ndarray
    heads: int = 1
    scale: Optional[float] = None
    pos_embed: Optional[np.ndarray] = None
    include_mean_token: bool = False

    def __post_init__(self):
        c, d_e = self.w_q.shape
        if self.w_k.shape != (c, d_e) or self.w_v.shape != (c, d_e):
            raise DimensionError("w_q/w_k/w_v shapes disagree")
        if self.w_c.shape[0] != d_e:
            raise DimensionError("w_c input dim must equal embed dim")
        if self.heads < 1 or d_e % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide embed dim {d_e}")
        if self.scale is not None and self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.pos_embed is not None and self.pos_embed.shape[1] != c:
            raise DimensionError("pos_embed width must equal channel count")

    @property
    def in_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_c.shape[1]

    @property
    def effective_scale(self) -> float:
        if self.scale is not None:
            return float(self.scale)
        return math.sqrt(self.embed_dim / self.heads)

    def tensors(self) -> dict:
        out = {name: getattr(self, name) for name in TENSOR_FIELDS}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        return out

    def copy(self) -> "AttnPoolParams":
        return replace(
            self,
            **{k: v.copy() for k, v in self.tensors().items()},
        )

    def astype(self, dtype) -> "AttnPoolParams":
        return replace(
            self,
            **{k: v.astype(dtype) for k, v in self.tensors().items()},
        )

    @classmethod
    def random_init(cls, rng, channels, embed_dim, out_dim, heads=1,
                    scale=None, grid_tokens=None, include_mean_token=False,
                    dtype=np.float32):
        """Gaussian init scaled by 1/sqrt(fan_in); biases zero."""
        def lin(m, n):
            return (rng.standard_normal((m, n)) / math.sqrt(m)).astype(dtype)

        pos = None
        if grid_tokens is not None:
            pos = (rng.standard_normal((grid_tokens + 1, channels))
                   / math.sqrt(channels)).astype(dtype)
        return cls(
            w_q=lin(channels, embed_dim), b_q=np.zeros(embed_dim, dtype),
            w_k=lin(channels, embed_dim), b_k=np.zeros(embed_dim, dtype),
            w_v=lin(channels, embed_dim), b_v=np.zeros(embed_dim, dtype),
            w_c=lin(embed_dim, out_dim), b_c=np.zeros(out_dim, dtype),
            heads=heads, scale=scale, pos_embed=pos,
            include_mean_token=include_mean_token,
        )


@dataclass
class AttnPoolGrads:
    """Parameter gradients, one array per AttnPoolParams tensor field."""

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_c: np.ndarray
    b_c: np.ndarray
    pos_embed: Optional[np.ndarray] = None

    def tensors(self) -> dict:
        out = {name: getattr(self, name) for name in TENSOR_FIELDS}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        return out


def mean_feature(fmap: DenseFeatureMap) -> np.ndarray:
    """Per-channel average over all spatial locations."""
    return np.mean(fmap.values, axis=0)


def _check_compat(params: AttnPoolParams, n_tokens: int, channels: int):
    if channels != params.in_dim:
        raise DimensionError(
            f"feature channels {channels} != layer input dim {params.in_dim}"
        )
    if params.pos_embed is not None and params.pos_embed.shape[0] != n_tokens + 1:
        raise DimensionError(
            f"pos_embed has {params.pos_embed.shape[0]} rows, "
            f"grid needs {n_tokens + 1}"
        )


def _tokens_batch(params: AttnPoolParams, maps: np.ndarray):
    """Assemble (query token, attendable tokens) for a (B, HW, C) batch.

    Returns (qtok (B, C), tok (B, T, C)) with positional rows already added.
    """
    b, hw, c = maps.shape
    _check_compat(params, hw, c)
    mean = np.mean(maps, axis=1)  # (B, C)
    if params.include_mean_token:
        tok = np.concatenate([mean[:, None, :], maps], axis=1)
    else:
        tok = maps
    if params.pos_embed is not None:
        pos = params.pos_embed
        qtok = mean + pos[0]
        if params.include_mean_token:
            tok = tok + pos[None, :, :]
        else:
            tok = tok + pos[None, 1:, :]
    else:
        qtok = mean
    return qtok, tok


def _attention_batch(params: AttnPoolParams, maps: np.ndarray):
    """Shared forward pass; returns intermediates used by forward/backward."""
    qtok, tok = _tokens_batch(params, maps)
    b, t, c = tok.shape
    h = params.heads
    d_e = params.embed_dim
    dh = d_e // h
    s = params.effective_scale

    q = qtok @ params.w_q + params.b_q            # (B, d_e)
    k = tok @ params.w_k + params.b_k             # (B, T, d_e)
    v = tok @ params.w_v + params.b_v             # (B, T, d_e)

    qh = q.reshape(b, h, dh)
    kh = k.reshape(b, t, h, dh).transpose(0, 2, 1, 3)   # (B, h, T, dh)
    vh = v.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    scores = np.einsum("bhd,bhtd->bht", qh, kh) / s
    weights = softmax_rows(scores)                       # (B, h, T)
    pooled_heads = np.einsum("bht,bhtd->bhd", weights, vh)
    pooled = pooled_heads.reshape(b, d_e)
    out = pooled @ params.w_c + params.b_c               # (B, d_out)
    return {
        "qtok": qtok, "tok": tok, "qh": qh, "kh": kh, "vh": vh,
        "weights": weights, "pooled": pooled, "out": out,
    }


def attn_forward_batch(params: AttnPoolParams, maps: np.ndarray) -> np.ndarray:
    """Pooled output for a (B, HW, C) batch of feature maps; returns (B, d_out)."""
    return _attention_batch(params, np.asarray(maps))["out"]


def attn_forward(params: AttnPoolParams, fmap: DenseFeatureMap) -> np.ndarray:
    """Pooled output vector (d_out,) for one feature map."""
    return attn_forward_batch(params, fmap.values[None, :, :])[0]


def attn_weights_batch(params: AttnPoolParams, maps: np.ndarray) -> np.ndarray:
    """The exact softmax rows used internally; (B, heads, T)."""
    return _attention_batch(params, np.asarray(maps))["weights"]


def attn_weights(params: AttnPoolParams, fmap: DenseFeatureMap) -> np.ndarray:
    """(heads, T) attention rows for one map, T = H*W (+1 with mean token)."""
    return attn_weights_batch(params, fmap.values[None, :, :])[0]


def attn_backward_batch(params: AttnPoolParams, maps: np.ndarray,
                        upstream: np.ndarray) -> AttnPoolGrads:
    """Gradients of sum_b <upstream_b, attn_forward(params, maps_b)> with
    respect to every parameter tensor. The input maps are treated as
    constants (frozen extractor)."""
    maps = np.asarray(maps)
    upstream = np.asarray(upstream)
    cache = _attention_batch(params, maps)
    qtok, tok = cache["qtok"], cache["tok"]
    qh, kh, vh = cache["qh"], cache["kh"], cache["vh"]
    weights, pooled = cache["weights"], cache["pooled"]

    b, t, c = tok.shape
    h = params.heads
    d_e = params.embed_dim
    dh = d_e // h
    s = params.effective_scale

    g_bc = upstream.sum(axis=0)
    g_wc = pooled.T @ upstream
    g_pooled = (upstream @ params.w_c.T).reshape(b, h, dh)

    g_vh = np.einsum("bht,bhd->bhtd", weights, g_pooled)
    g_weights = np.einsum("bhtd,bhd->bht", vh, g_pooled)
    inner = np.sum(g_weights * weights, axis=-1, keepdims=True)
    g_scores = weights * (g_weights - inner) / s

    g_qh = np.einsum("bht,bhtd->bhd", g_scores, kh)
    g_kh = np.einsum("bht,bhd->bhtd", g_scores, qh)

    g_q = g_qh.reshape(b, d_e)
    g_k = g_kh.transpose(0, 2, 1, 3).reshape(b, t, d_e)
    g_v = g_vh.transpose(0, 2, 1, 3).reshape(b, t, d_e)

    g_wq = qtok.T @ g_q
    g_bq = g_q.sum(axis=0)
    tok_flat = tok.reshape(b * t, c)
    g_wk = tok_flat.T @ g_k.reshape(b * t, d_e)
    g_bk = g_k.sum(axis=(0, 1))
    g_wv = tok_flat.T @ g_v.reshape(b * t, d_e)
    g_bv = g_v.sum(axis=(0, 1))

    g_pos = None
    if params.pos_embed is not None:
        g_tok = g_k @ params.w_k.T + g_v @ params.w_v.T   # (B, T, C)
        g_qtok = g_q @ params.w_q.T                       # (B, C)
        g_pos = np.zeros_like(params.pos_embed)
        g_pos[0] += g_qtok.sum(axis=0)
        if params.include_mean_token:
            g_pos += g_tok.sum(axis=0)
        else:
            g_pos[1:] += g_tok.sum(axis=0)

    return AttnPoolGrads(
        w_q=g_wq, b_q=g_bq, w_k=g_wk, b_k=g_bk,
        w_v=g_wv, b_v=g_bv, w_c=g_wc, b_c=g_bc, pos_embed=g_pos,
    )


def attn_backward(params: AttnPoolParams, fmap: DenseFeatureMap,
                  upstream: np.ndarray) -> AttnPoolGrads:
    """Single-map wrapper around attn_backward_batch."""
    return attn_backward_batch(params, fmap.values[None, :, :],
                               np.asarray(upstream)[None, :])
