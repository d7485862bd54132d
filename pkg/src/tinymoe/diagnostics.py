"""Per-layer router health metrics and collapse detection."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .moe import RouterDecision


@dataclass
class LayerRouting:
    busiest_fraction: float
    usage_variance: float
    mean_entropy: float
    mean_logz: float
    mean_top_gate: float  # mean largest router probability
    mean_margin: float  # mean p_top1 - p_top2
    expert_fractions: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def routing_stats(probs: np.ndarray, topk_indices: np.ndarray, lse: np.ndarray) -> LayerRouting:
    probs = np.asarray(probs, dtype=np.float64)
    n_experts = probs.shape[1]
    counts = np.bincount(np.asarray(topk_indices).reshape(-1), minlength=n_experts)
    frac = counts / counts.sum()
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    top2 = -np.sort(-probs, axis=1)[:, :2]
    margin = top2[:, 0] - top2[:, 1] if n_experts > 1 else top2[:, 0]
    return LayerRouting(
        busiest_fraction=float(frac.max()),
        usage_variance=float(frac.var()),
        mean_entropy=float(-plogp.sum(axis=1).mean()),
        mean_logz=float(np.mean(lse)),
        mean_top_gate=float(top2[:, 0].mean()),
        mean_margin=float(margin.mean()),
        expert_fractions=[float(f) for f in frac],
    )


def collect(decisions_per_layer: Sequence[Sequence[RouterDecision]]) -> list[LayerRouting]:
    """Pool decisions of each layer across batches, then summarise."""
    out = []
    for batch in decisions_per_layer:
        if not batch:
            raise ValueError("no router decisions for layer")
        out.append(routing_stats(
            np.concatenate([d.probs.data for d in batch]),
            np.concatenate([d.topk_indices for d in batch]),
            np.concatenate([d.lse.data for d in batch]),
        ))
    return out


def collapse_detector(series: Sequence[Sequence[LayerRouting | dict]], threshold: float = 0.9) -> list[bool]:
    """Per-layer verdict at the latest eval point: busiest fraction above ``threshold``."""
    if not series:
        raise ValueError("need at least one eval point")
    latest = series[-1]
    frac = lambda r: r["busiest_fraction"] if isinstance(r, dict) else r.busiest_fraction
    return [frac(r) > threshold for r in latest]


def render_table(series: Sequence[Sequence[dict]]) -> str:
    """Layer / Entropy / Gate / Margin / Logz-trend table from the latest point."""
    first, last = series[0], series[-1]
    lines = [f"{'Layer':<6}{'Entropy':>9}{'Gate':>8}{'Margin':>9}{'Busiest':>9}   Logz trend"]
    for i, (a, b) in enumerate(zip(first, last)):
        lines.append(
            f"L{i:<5}{b['mean_entropy']:>9.3f}{b['mean_top_gate']:>8.3f}{b['mean_margin']:>9.3f}"
            f"{b['busiest_fraction']:>9.3f}   {a['mean_logz']:.3f} -> {b['mean_logz']:.3f}"
        )
    return "\n".join(lines)
