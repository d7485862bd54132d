"""LLaMA-style decoder pieces: RMSNorm, RoPE, grouped-query attention, SwiGLU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if x.shape[-1] != gain.shape[-1]:
        raise T.ShapeError("rmsnorm", x.shape, gain.shape)
    ms = T.mean(T.square(x), axis=-1, keepdims=True)
    return x * T.rsqrt(ms + eps) * gain


def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate (..., T, head_dim) query or key vectors by their positions."""
    cos, sin = rope_angles(positions, x.shape[-1], base)
    return T.rotary(x, cos, sin)


@dataclass
class AttentionWeights:
    wq: Tensor  # (d_model, n_q * head_dim)
    wk: Tensor  # (d_model, n_kv * head_dim)
    wv: Tensor
    wo: Tensor  # (n_q * head_dim, d_model)


def gqa_attention(
    x: Tensor,
    w: AttentionWeights,
    n_query_heads: int,
    n_kv_heads: int,
    *,
    rope_base: float = 10000.0,
    context_len: int | None = None,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal grouped-query attention on a (B, T, d_model) batch."""
    if x.ndim != 3:
        raise T.ShapeError("gqa_attention", x.shape, detail="expected (batch, time, d_model)")
    if n_query_heads % n_kv_heads:
        raise ConfigError(f"n_query_heads={n_query_heads} not divisible by n_kv_heads={n_kv_heads}")
    B, L, _ = x.shape
    if context_len is not None and L > context_len:
        raise ValueError(f"sequence length {L} exceeds context_len {context_len}")
    head_dim = w.wq.shape[1] // n_query_heads
    group = n_query_heads // n_kv_heads

    def heads(t: Tensor, n: int) -> Tensor:
        return t.reshape(B, L, n, head_dim).transpose(1, 2)

    pos = np.arange(L)
    q = apply_rope(heads(x @ w.wq, n_query_heads), pos, rope_base)
    k = apply_rope(heads(x @ w.wk, n_kv_heads), pos, rope_base)
    v = heads(x @ w.wv, n_kv_heads)
    if group > 1:
        kv_of_head = np.arange(n_query_heads) // group
        k = T.index_select(k, kv_of_head, axis=1)
        v = T.index_select(v, kv_of_head, axis=1)

    scores = T.scale(q @ k.transpose(2, 3), 1.0 / np.sqrt(head_dim))
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    probs = T.softmax(T.masked_fill(scores, future, -np.inf))
    ctx = (probs @ v).transpose(1, 2).reshape(B, L, n_query_heads * head_dim)
    return T.dropout(ctx @ w.wo, dropout_p, train, rng)


def swiglu_ffn(
    x: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
    *,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = T.silu(x @ w_gate) * (x @ w_up)
    return T.dropout(h @ w_down, dropout_p, train, rng)
