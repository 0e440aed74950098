"""Attention, feed-forward, normalisation and lifting building blocks.

Parameters are plain dataclasses of Tensors. Initialisation draws weights
from Normal(0, 1/fan_in) (variance convention), biases start at zero and
norm gains at one. Everything operates on [rows, channels] tensors; there
is no batch axis, a sample is one point set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add_row,
    attention_core,
    concat_lastdim,
    gelu,
    layer_norm,
    matmul,
    rms_norm,
    scale,
    softmax_lastdim,
    transpose,
)

NORM_KINDS = ("layernorm", "rmsnorm")


@dataclass
class MHAParams:
    """Projection weights of one multi-head attention. No projection biases."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int


@dataclass
class FFNParams:
    """Two-layer pointwise network: x @ w1 + b1, GELU, @ w2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NormParams:
    """Affine part of a pre-norm site; bias is None under rmsnorm."""

    gain: Tensor
    bias: Tensor | None


def _weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


def init_mha(rng: np.random.Generator, d: int, heads: int) -> MHAParams:
    if heads < 1 or d % heads != 0:
        raise ContractError(f"heads ({heads}) must divide width ({d})")
    return MHAParams(
        w_q=_weight(rng, d, d),
        w_k=_weight(rng, d, d),
        w_v=_weight(rng, d, d),
        w_o=_weight(rng, d, d),
        heads=heads,
    )


def init_ffn(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> FFNParams:
    return FFNParams(
        w1=_weight(rng, d_in, d_hidden),
        b1=Tensor(np.zeros(d_hidden), requires_grad=True),
        w2=_weight(rng, d_hidden, d_out),
        b2=Tensor(np.zeros(d_out), requires_grad=True),
    )


def init_norm(d: int, kind: str) -> NormParams:
    if kind not in NORM_KINDS:
        raise ContractError(f"unknown norm kind {kind!r}, expected one of {NORM_KINDS}")
    gain = Tensor(np.ones(d), requires_grad=True)
    bias = Tensor(np.zeros(d), requires_grad=True) if kind == "layernorm" else None
    return NormParams(gain=gain, bias=bias)


def apply_norm(x: Tensor, p: NormParams, kind: str, eps: float = 1e-5) -> Tensor:
    if kind == "layernorm":
        return layer_norm(x, p.gain, p.bias, eps)
    if kind == "rmsnorm":
        return rms_norm(x, p.gain, eps)
    raise ContractError(f"unknown norm kind {kind!r}, expected one of {NORM_KINDS}")


def positional_encoding(coords: np.ndarray, num_freqs: int = 8) -> Tensor:
    """Dyadic sinusoidal features of point coordinates.

    For each coordinate x_k emits sin(2^j * pi * x_k), cos(2^j * pi * x_k)
    for j = 0..num_freqs-1, ordered coordinate-major then frequency then
    (sin, cos). Output is a constant [N, 2*num_freqs*d_phys] tensor.
    """
    if num_freqs < 1:
        raise ContractError(f"num_freqs must be >= 1, got {num_freqs}")
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise DimensionError(f"coords must be [N] or [N, d_phys], got {pts.shape}")
    freqs = (2.0 ** np.arange(num_freqs)) * math.pi
    angles = pts[:, :, None] * freqs[None, None, :]
    feats = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return Tensor(feats.reshape(pts.shape[0], -1))


def sdpa(q: Tensor, k: Tensor, v: Tensor, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention softmax(q k^T / sqrt(d_h)) v.

    The softmax runs over keys. When weights_out is a list the attention
    weight matrix (post-softmax, detached) is appended to it.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 2:
            raise DimensionError(f"sdpa {name} must be 2-d, got {t.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"sdpa query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"sdpa key/value counts differ: {k.shape} vs {v.shape}")
    if k.shape[0] == 0:
        raise ContractError("sdpa needs at least one key")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    weights = softmax_lastdim(scores)
    if weights_out is not None:
        weights_out.append(weights.data.copy())
    return matmul(weights, v)


def multi_head_attention(
    q_in: Tensor, kv_in: Tensor, p: MHAParams, weights_out: list | None = None
) -> Tensor:
    """Multi-head attention over full-width inputs.

    Queries come from q_in, keys and values from kv_in. Projections are
    split into p.heads equal slices, attended independently, concatenated
    and mixed by w_o.
    """
    d = p.w_q.shape[0]
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise DimensionError(
            f"attention width mismatch: inputs {q_in.shape}/{kv_in.shape}, weights ({d}, {d})"
        )
    if d % p.heads != 0:
        raise ContractError(f"heads ({p.heads}) must divide width ({d})")
    q = matmul(q_in, p.w_q)
    k = matmul(kv_in, p.w_k)
    v = matmul(kv_in, p.w_v)
    merged = attention_core(q, k, v, p.heads, weights_out=weights_out)
    return matmul(merged, p.w_o)


def ffn_apply(x: Tensor, p: FFNParams) -> Tensor:
    """Pointwise two-layer network with GELU in the middle."""
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"ffn input width {x.shape} != weight {p.w1.shape}")
    hidden = gelu(add_row(matmul(x, p.w1), p.b1))
    return add_row(matmul(hidden, p.w2), p.b2)


def lift(features: Tensor, pe: Tensor, p: FFNParams) -> Tensor:
    """Lift raw per-point features plus positional features to model width."""
    if features.shape[0] != pe.shape[0]:
        raise DimensionError(
            f"lift row counts differ: features {features.shape}, pe {pe.shape}"
        )
    return ffn_apply(concat_lastdim([features, pe]), p)
