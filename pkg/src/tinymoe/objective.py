"""Training objective: next-token CE plus weighted router auxiliary terms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import ConfigError
from .moe import RouterDecision, balance_loss, z_loss
from .tensor import Tensor


@dataclass
class ObjectiveBreakdown:
    ce: float
    bal: float
    z: float
    total: float
    lambda_bal: float
    lambda_z: float


def next_token_ce(logits: Tensor, tokens: np.ndarray) -> Tensor:
    """Mean CE of positions 0..L-2 predicting tokens 1..L-1 (L-1 targets per row)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
        logits = logits.reshape(1, *logits.shape)
    B, L = tokens.shape
    if L < 2:
        raise ValueError("next-token loss needs windows of at least 2 tokens")
    V = logits.shape[-1]
    pred = T.slice_(logits, 1, 0, L - 1).reshape(B * (L - 1), V)
    return T.cross_entropy(pred, tokens[:, 1:].reshape(-1))


def loss_targets(window_len: int) -> int:
    return window_len - 1


def total_objective(ce, bal=0.0, z=0.0, lambda_bal: float = 1e-2, lambda_z: float = 1e-3):
    """``ce + lambda_bal * bal + lambda_z * z`` for floats or tensors alike."""
    if lambda_bal < 0 or lambda_z < 0:
        raise ConfigError("auxiliary loss weights must be non-negative")
    total = ce
    if lambda_bal:
        total = total + (T.scale(bal, lambda_bal) if isinstance(bal, Tensor) else lambda_bal * bal)
    if lambda_z:
        total = total + (T.scale(z, lambda_z) if isinstance(z, Tensor) else lambda_z * z)
    return total


def router_aux(decisions: Sequence[RouterDecision]) -> tuple[Tensor | None, Tensor | None]:
    """Balance and z losses averaged over MoE layers; (None, None) for dense models."""
    if not decisions:
        return None, None
    bal = z = None
    for d in decisions:
        b, zz = balance_loss(d.probs, d.topk_indices), z_loss(d.lse)
        bal = b if bal is None else bal + b
        z = zz if z is None else z + zz
    n = len(decisions)
    return T.scale(bal, 1.0 / n), T.scale(z, 1.0 / n)


def compose(ce: Tensor, decisions: Sequence[RouterDecision], lambda_bal: float, lambda_z: float) -> tuple[Tensor, ObjectiveBreakdown]:
    bal, z = router_aux(decisions)
    if bal is None:
        total = ce
        bal_v = z_v = 0.0
    else:
        total = total_objective(ce, bal, z, lambda_bal, lambda_z)
        bal_v, z_v = bal.item(), z.item()
    ce_v = ce.item()
    return total, ObjectiveBreakdown(ce_v, bal_v, z_v, total_objective(ce_v, bal_v, z_v, lambda_bal, lambda_z), lambda_bal, lambda_z)


def perplexity(ce: float) -> float:
    return math.exp(ce)
