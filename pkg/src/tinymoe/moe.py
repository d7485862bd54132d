"""Routed SwiGLU experts: top-k router, auxiliary losses, dropless dispatch.

Expert weights are stored stacked, ``w_gate``/``w_up`` as (E, d, h) and
``w_down`` as (E, h, d). The three dispatch paths compute the same function:

* ``naive``   loops over (token, slot) pairs,
* ``grouped`` buckets tokens by expert and runs one matmul set per bucket,
* ``stacked`` pads every bucket to a common length and runs one batched
  matmul over the stacked weights.

Nothing is dropped: every (token, selected expert) pair is executed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .blocks import ConfigError, swiglu_ffn
from .tensor import Tensor

DispatchPath = Literal["naive", "grouped", "stacked"]
DISPATCH_PATHS: tuple[str, ...] = ("naive", "grouped", "stacked")


class DispatchError(RuntimeError):
    """Dispatch plan lost or duplicated a (token, expert) assignment."""


@dataclass
class MoEConfig:
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 1024
    lambda_bal: float = 1e-2
    lambda_z: float = 1e-3
    dispatch_path: str = "grouped"
    # None: renormalise selected probs when top_k > 1, raw prob gate for top-1
    renormalize: bool | None = None

    def __post_init__(self):
        if self.n_experts < 1 or not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"need 1 <= top_k <= n_experts, got top_k={self.top_k}, n_experts={self.n_experts}")
        if self.expert_hidden < 1:
            raise ConfigError("expert_hidden must be positive")
        if self.lambda_bal < 0 or self.lambda_z < 0:
            raise ConfigError("auxiliary loss weights must be non-negative")
        if self.dispatch_path not in DISPATCH_PATHS:
            raise ConfigError(f"unknown dispatch_path {self.dispatch_path!r}; choose from {DISPATCH_PATHS}")

    @property
    def renormalize_gates(self) -> bool:
        return self.top_k > 1 if self.renormalize is None else self.renormalize


@dataclass
class RouterDecision:
    logits: Tensor  # (N, E)
    probs: Tensor  # (N, E)
    lse: Tensor  # (N,)
    topk_indices: np.ndarray  # (N, k), descending prob
    gates: Tensor  # (N, k)

    @property
    def n_tokens(self) -> int:
        return self.topk_indices.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def top_k(self) -> int:
        return self.topk_indices.shape[1]


@dataclass
class ExpertAssignment:
    """Dispatch plan: for each expert, the tokens it serves and their gate slots."""

    tokens: list[np.ndarray]
    slots: list[np.ndarray]  # flat index t * top_k + j into the (N, k) gate matrix
    n_tokens: int
    top_k: int

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.tokens])


def topk_lowest_index(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p keeps the lower expert id first among ties
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def route(x: Tensor, router_weight: Tensor, top_k: int, renormalize: bool | None = None) -> RouterDecision:
    """Softmax router with top-k selection over a (N, d) token matrix."""
    n_experts = router_weight.shape[1]
    if not 1 <= top_k <= n_experts:
        raise ConfigError(f"top_k={top_k} out of range for {n_experts} experts")
    if renormalize is None:
        renormalize = top_k > 1
    logits = x @ router_weight
    probs = T.softmax(logits)
    lse = T.logsumexp(logits)
    idx = topk_lowest_index(probs.data, top_k)
    n = x.shape[0]
    flat = (np.arange(n)[:, None] * n_experts + idx).reshape(-1)
    gates = T.index_select(probs.reshape(n * n_experts), flat, 0).reshape(n, top_k)
    if renormalize:
        gates = gates / gates.sum(axis=-1, keepdims=True)
    return RouterDecision(logits, probs, lse, idx, gates)


def assignment_fractions(topk_indices: np.ndarray, n_experts: int) -> np.ndarray:
    counts = np.bincount(topk_indices.reshape(-1), minlength=n_experts)
    return counts / topk_indices.size


def balance_loss(probs: Tensor, topk_indices: np.ndarray) -> Tensor:
    """Switch-style ``E * sum_e f_e * P_e``.

    ``f_e`` is the share of routed slots going to expert e (each token
    contributes k slots of weight 1/k) and carries no gradient; ``P_e`` is the
    mean router probability.
    """
    n_experts = probs.shape[1]
    f = assignment_fractions(topk_indices, n_experts).astype(probs.dtype)
    mean_p = T.mean(probs, axis=0)
    return T.scale(T.sum_(mean_p * f), float(n_experts))


def z_loss(lse: Tensor) -> Tensor:
    """Mean squared router log-sum-exp."""
    return T.mean(T.square(lse))


def build_plan(topk_indices: np.ndarray, n_experts: int) -> ExpertAssignment:
    n, k = topk_indices.shape
    flat_e = topk_indices.reshape(-1)
    order = np.argsort(flat_e, kind="stable")
    bounds = np.searchsorted(flat_e[order], np.arange(n_experts + 1))
    tokens, slots = [], []
    for e in range(n_experts):
        sl = order[bounds[e]:bounds[e + 1]]
        slots.append(sl)
        tokens.append(sl // k)
    plan = ExpertAssignment(tokens, slots, n, k)
    check_plan(plan, topk_indices)
    return plan


def check_plan(plan: ExpertAssignment, topk_indices: np.ndarray) -> None:
    n, k = topk_indices.shape
    all_slots = np.concatenate(plan.slots) if plan.slots else np.zeros(0, dtype=np.int64)
    if all_slots.size != n * k:
        raise DispatchError(f"plan holds {all_slots.size} assignments, expected {n * k}")
    if not np.array_equal(np.sort(all_slots), np.arange(n * k)):
        raise DispatchError("plan has duplicate or missing (token, slot) pairs")
    for e, sl in enumerate(plan.slots):
        if np.any(topk_indices.reshape(-1)[sl] != e):
            raise DispatchError(f"expert {e} bucket holds slots routed elsewhere")


@dataclass
class ExpertWeights:
    w_gate: Tensor  # (E, d, h)
    w_up: Tensor  # (E, d, h)
    w_down: Tensor  # (E, h, d)

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[0]

    def expert(self, e: int) -> tuple[Tensor, Tensor, Tensor]:
        _, d, h = self.w_gate.shape
        pick = np.array([e])
        return (
            T.index_select(self.w_gate, pick, 0).reshape(d, h),
            T.index_select(self.w_up, pick, 0).reshape(d, h),
            T.index_select(self.w_down, pick, 0).reshape(h, d),
        )


def dispatch_naive(x: Tensor, decision: RouterDecision, experts: ExpertWeights) -> Tensor:
    n, k = decision.topk_indices.shape
    flat_gates = decision.gates.reshape(n * k)
    cache: dict[int, tuple[Tensor, Tensor, Tensor]] = {}
    rows = []
    for t in range(n):
        xt = T.index_select(x, np.array([t]), 0)
        acc = None
        for j in range(k):
            e = int(decision.topk_indices[t, j])
            if e not in cache:
                cache[e] = experts.expert(e)
            y = swiglu_ffn(xt, *cache[e])
            g = T.index_select(flat_gates, np.array([t * k + j]), 0).reshape(1, 1)
            acc = y * g if acc is None else acc + y * g
        rows.append(acc)
    return T.concat(rows, axis=0)


def dispatch_grouped(x: Tensor, decision: RouterDecision, experts: ExpertWeights, plan: ExpertAssignment | None = None) -> Tensor:
    n, k = decision.topk_indices.shape
    plan = plan or build_plan(decision.topk_indices, experts.n_experts)
    flat_gates = decision.gates.reshape(n * k)
    outs, dest = [], []
    for e in range(experts.n_experts):
        tok = plan.tokens[e]
        if tok.size == 0:
            continue
        y = swiglu_ffn(T.index_select(x, tok, 0), *experts.expert(e))
        g = T.index_select(flat_gates, plan.slots[e], 0).reshape(-1, 1)
        outs.append(y * g)
        dest.append(tok)
    return T.scatter_add(T.concat(outs, axis=0), np.concatenate(dest), n, axis=0)


def dispatch_stacked(x: Tensor, decision: RouterDecision, experts: ExpertWeights, plan: ExpertAssignment | None = None) -> Tensor:
    n, k = decision.topk_indices.shape
    d = x.shape[1]
    E = experts.n_experts
    plan = plan or build_plan(decision.topk_indices, E)
    cap = int(plan.counts.max())
    # padded rows point at an appended zero token with an appended zero gate
    tok_pad = np.full((E, cap), n, dtype=np.int64)
    slot_pad = np.full((E, cap), n * k, dtype=np.int64)
    for e in range(E):
        c = len(plan.tokens[e])
        tok_pad[e, :c] = plan.tokens[e]
        slot_pad[e, :c] = plan.slots[e]
    x_pad = T.concat([x, Tensor(np.zeros((1, d), dtype=x.dtype))], axis=0)
    g_pad = T.concat([decision.gates.reshape(n * k), Tensor(np.zeros(1, dtype=x.dtype))], axis=0)
    xs = T.index_select(x_pad, tok_pad.reshape(-1), 0).reshape(E, cap, d)
    h = T.silu(xs @ experts.w_gate) * (xs @ experts.w_up)
    ys = (h @ experts.w_down).reshape(E * cap, d)
    gs = T.index_select(g_pad, slot_pad.reshape(-1), 0).reshape(E * cap, 1)
    out = T.scatter_add(ys * gs, tok_pad.reshape(-1), n + 1, axis=0)
    return T.slice_(out, 0, 0, n)


_DISPATCH = {"naive": dispatch_naive, "grouped": dispatch_grouped, "stacked": dispatch_stacked}


def moe_forward(
    x: Tensor,
    router_weight: Tensor,
    experts: ExpertWeights,
    cfg: MoEConfig,
    *,
    path: str | None = None,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, RouterDecision]:
    """Route and run a (N, d) token matrix; returns output and the router decision."""
    decision = route(x, router_weight, cfg.top_k, cfg.renormalize_gates)
    path = path or cfg.dispatch_path
    if path not in _DISPATCH:
        raise ConfigError(f"unknown dispatch path {path!r}")
    y = _DISPATCH[path](x, decision, experts)
    return T.dropout(y, dropout_p, train, rng), decision
