"""Decoder-only model: tied embeddings, pre-norm blocks, dense or routed FFN."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import AttentionWeights, ConfigError, gqa_attention, rmsnorm, swiglu_ffn
from .moe import ExpertWeights, MoEConfig, RouterDecision, moe_forward
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_query_heads: int
    n_kv_heads: int
    context_len: int = 512
    ffn_hidden: int | None = None
    moe: MoEConfig | None = None
    head_dim: int | None = None
    dropout_p: float = 0.1
    rmsnorm_eps: float = 1e-5
    rope_base: float = 10000.0
    tied_embeddings: bool = True
    linear_bias: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoEConfig(**self.moe)
        if self.head_dim is None:
            if self.n_query_heads <= 0 or self.d_model % self.n_query_heads:
                raise ConfigError(f"d_model={self.d_model} not divisible by n_query_heads={self.n_query_heads}")
            self.head_dim = self.d_model // self.n_query_heads
        if self.n_kv_heads <= 0 or self.n_query_heads % self.n_kv_heads:
            raise ConfigError(f"n_query_heads={self.n_query_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_model != self.n_query_heads * self.head_dim:
            raise ConfigError("d_model must equal n_query_heads * head_dim")
        if self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        if (self.ffn_hidden is None) == (self.moe is None):
            raise ConfigError("set exactly one of ffn_hidden (dense) or moe (sparse)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.rmsnorm_eps <= 0:
            raise ConfigError("rmsnorm_eps must be positive")
        if not self.tied_embeddings or self.linear_bias:
            raise ConfigError("only tied embeddings without linear biases are supported")
        for name in ("vocab_size", "d_model", "n_layers", "context_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def is_moe(self) -> bool:
        return self.moe is not None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    logits: Tensor
    router: list[RouterDecision] = field(default_factory=list)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """normal(0, std) matrices, output projections scaled by 1/sqrt(2 * n_layers), unit norm gains."""
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    out_std = std / math.sqrt(2 * cfg.n_layers)
    d, hd = cfg.d_model, cfg.head_dim
    q_dim, kv_dim = cfg.n_query_heads * hd, cfg.n_kv_heads * hd

    def normal(shape, s):
        return rng.normal(0.0, s, size=shape).astype(dtype)

    p: dict[str, np.ndarray] = {"embed": normal((cfg.vocab_size, d), std)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(d, dtype=dtype)
        p[pre + "wq"] = normal((d, q_dim), std)
        p[pre + "wk"] = normal((d, kv_dim), std)
        p[pre + "wv"] = normal((d, kv_dim), std)
        p[pre + "wo"] = normal((q_dim, d), out_std)
        p[pre + "ffn_norm"] = np.ones(d, dtype=dtype)
        if cfg.moe is None:
            h = cfg.ffn_hidden
            p[pre + "ffn.w_gate"] = normal((d, h), std)
            p[pre + "ffn.w_up"] = normal((d, h), std)
            p[pre + "ffn.w_down"] = normal((h, d), out_std)
        else:
            E, h = cfg.moe.n_experts, cfg.moe.expert_hidden
            p[pre + "moe.router"] = normal((d, E), std)
            p[pre + "moe.w_gate"] = normal((E, d, h), std)
            p[pre + "moe.w_up"] = normal((E, d, h), std)
            p[pre + "moe.w_down"] = normal((E, h, d), out_std)
    p["final_norm"] = np.ones(d, dtype=dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def dropout_rng(key: tuple[int, ...] | None, layer: int, site: int) -> np.random.Generator | None:
    """Counter-style stream keyed by (seed, step, micro-step, layer, site)."""
    if key is None:
        return None
    return np.random.default_rng([*key, layer, site])


class DecoderModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_params(self) -> int:
        return T.param_count(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(
        self,
        tokens: np.ndarray,
        train: bool = False,
        rng_key: tuple[int, ...] | None = None,
        dispatch_path: str | None = None,
    ) -> ForwardOutput:
        """Logits for a (T,) window or a (B, T) batch of token ids."""
        cfg, P = self.cfg, self.params
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        B, L = tokens.shape
        if L > cfg.context_len:
            raise ValueError(f"window length {L} exceeds context_len {cfg.context_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range for vocab_size {cfg.vocab_size}")
        p_drop = cfg.dropout_p if train else 0.0

        x = T.embedding(P["embed"], tokens)
        decisions: list[RouterDecision] = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            attn_w = AttentionWeights(P[pre + "wq"], P[pre + "wk"], P[pre + "wv"], P[pre + "wo"])
            h = rmsnorm(x, P[pre + "attn_norm"], cfg.rmsnorm_eps)
            x = x + gqa_attention(
                h, attn_w, cfg.n_query_heads, cfg.n_kv_heads,
                rope_base=cfg.rope_base, context_len=cfg.context_len,
                dropout_p=p_drop, train=train, rng=dropout_rng(rng_key, i, 0),
            )
            h = rmsnorm(x, P[pre + "ffn_norm"], cfg.rmsnorm_eps)
            if cfg.moe is None:
                f = swiglu_ffn(
                    h, P[pre + "ffn.w_gate"], P[pre + "ffn.w_up"], P[pre + "ffn.w_down"],
                    dropout_p=p_drop, train=train, rng=dropout_rng(rng_key, i, 1),
                )
            else:
                experts = ExpertWeights(P[pre + "moe.w_gate"], P[pre + "moe.w_up"], P[pre + "moe.w_down"])
                flat, decision = moe_forward(
                    h.reshape(B * L, cfg.d_model), P[pre + "moe.router"], experts, cfg.moe,
                    path=dispatch_path, dropout_p=p_drop, train=train, rng=dropout_rng(rng_key, i, 1),
                )
                f = flat.reshape(B, L, cfg.d_model)
                decisions.append(decision)
            x = x + f
        x = rmsnorm(x, P["final_norm"], cfg.rmsnorm_eps)
        logits = x @ P["embed"].T
        if single:
            logits = logits.reshape(L, cfg.vocab_size)
        return ForwardOutput(logits, decisions)

    __call__ = forward
