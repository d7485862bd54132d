"""Exact parameter accounting, dense-width search, and fairness gaps."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .blocks import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class ParamBreakdown:
    embedding: int
    non_ffn_blocks: int
    ffn_or_expert_total: int
    router: int
    total: int
    active: int

    def as_millions(self) -> dict[str, float]:
        return {k: round(v / 1e6, 2) for k, v in self.__dict__.items()}


def count_params(cfg: ModelConfig) -> ParamBreakdown:
    d, hd, L = cfg.d_model, cfg.head_dim, cfg.n_layers
    q_dim, kv_dim = cfg.n_query_heads * hd, cfg.n_kv_heads * hd
    embedding = cfg.vocab_size * d  # tied, counted once
    attn = d * q_dim + 2 * d * kv_dim + q_dim * d
    non_ffn = L * (attn + 2 * d) + d
    if cfg.moe is None:
        ffn = L * 3 * d * cfg.ffn_hidden
        router = 0
        inactive = 0
    else:
        m = cfg.moe
        per_expert = 3 * d * m.expert_hidden
        ffn = L * m.n_experts * per_expert
        router = L * d * m.n_experts
        inactive = L * (m.n_experts - m.top_k) * per_expert
    total = embedding + non_ffn + ffn + router
    return ParamBreakdown(embedding, non_ffn, ffn, router, total, total - inactive)


@dataclass(frozen=True)
class BudgetConstraints:
    vocab_size: int = 30008
    n_layers: int = 4
    head_dim: int = 64
    n_kv_heads: int = 2
    context_len: int = 512
    d_model_granularity: int = 32
    d_model_min: int = 64
    d_model_max: int = 1024
    # ffn_hidden = ratio * d_model, ratio on a grid of ratio_step
    ffn_ratio_min: float = 3.0
    ffn_ratio_max: float = 4.5
    ffn_ratio_step: float = 0.5


@dataclass
class MatchResult:
    config: ModelConfig
    count: int
    target: int
    rel_error: float
    candidates_searched: int


def _ratio_grid(c: BudgetConstraints) -> list[float]:
    n = int(round((c.ffn_ratio_max - c.ffn_ratio_min) / c.ffn_ratio_step))
    return [c.ffn_ratio_min + i * c.ffn_ratio_step for i in range(n + 1)]


def match_budget(
    target: Literal["active", "total"],
    target_count: int,
    constraints: BudgetConstraints = BudgetConstraints(),
    template: ModelConfig | None = None,
) -> MatchResult:
    """Grid-search a dense config whose active/total count is closest to ``target_count``.

    Candidates are enumerated in ascending (d_model, ratio) order and the first
    minimiser wins, so the result is deterministic.
    """
    if target not in ("active", "total"):
        raise ValueError(f"target must be 'active' or 'total', got {target!r}")
    c = constraints
    best: tuple[float, ModelConfig, int] | None = None
    searched = 0
    rejected = {"d_model % head_dim": 0, "heads % kv": 0, "non-integer ffn": 0}
    widths = range(c.d_model_min, c.d_model_max + 1, c.d_model_granularity)
    for d, ratio in itertools.product(widths, _ratio_grid(c)):
        if d % c.head_dim:
            rejected["d_model % head_dim"] += 1
            continue
        n_q = d // c.head_dim
        if n_q % c.n_kv_heads:
            rejected["heads % kv"] += 1
            continue
        ffn = ratio * d
        if abs(ffn - round(ffn)) > 1e-9:
            rejected["non-integer ffn"] += 1
            continue
        searched += 1
        base = dict(
            vocab_size=c.vocab_size, d_model=d, n_layers=c.n_layers, n_query_heads=n_q,
            n_kv_heads=c.n_kv_heads, context_len=c.context_len, ffn_hidden=int(round(ffn)), moe=None,
        )
        cfg = replace(template, head_dim=None, **base) if template is not None else ModelConfig(**base)
        bd = count_params(cfg)
        count = bd.active if target == "active" else bd.total
        err = abs(count - target_count) / target_count
        if best is None or err < best[0]:
            best = (err, cfg, count)
    if best is None:
        raise ConfigError(f"no feasible dense config; rejected candidates by constraint: {rejected}")
    err, cfg, count = best
    return MatchResult(cfg, count, target_count, err, searched)


def fairness_gaps(dense_active: Sequence[float], moe: Sequence[float], dense_total: Sequence[float]) -> dict[str, np.ndarray]:
    """Per-checkpoint gaps, signed so positive favours the narrative direction.

    ``active_gap = dense_active - moe`` and ``total_gap = moe - dense_total``;
    the ``best_*`` entries use each series' minimum.
    """
    a, m, t = (np.asarray(s, dtype=np.float64) for s in (dense_active, moe, dense_total))
    if not (a.shape == m.shape == t.shape):
        raise ValueError(f"misaligned series: dense_active {a.shape}, moe {m.shape}, dense_total {t.shape}")
    return {
        "active_gap": a - m,
        "total_gap": m - t,
        "best_active_gap": np.asarray(a.min() - m.min()),
        "best_total_gap": np.asarray(m.min() - t.min()),
    }


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for one value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
