"""Throughput comparison of the three dispatch paths on one routed batch."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .moe import DISPATCH_PATHS, ExpertWeights, _DISPATCH, route


@dataclass
class BenchShape:
    tokens: int = 4096
    d_model: int = 256
    n_experts: int = 4
    hidden: int = 1024
    top_k: int = 2


@dataclass
class BenchReport:
    shape: dict
    repeats: int
    tokens_per_s: dict[str, float]
    max_rel_deviation: dict[str, float]
    ordering: list[str]  # fastest first

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"{'path':<10}{'tok/s':>14}{'max rel dev vs naive':>24}"]
        for p in DISPATCH_PATHS:
            lines.append(f"{p:<10}{self.tokens_per_s[p]:>14,.0f}{self.max_rel_deviation[p]:>24.2e}")
        lines.append("ordering: " + " > ".join(self.ordering))
        return "\n".join(lines)


def bench_dispatch(shape: BenchShape = BenchShape(), repeats: int = 5, seed: int = 0, backward: bool = False) -> BenchReport:
    """Median tokens/s per path over ``repeats`` timed calls after one warmup call."""
    rng = np.random.default_rng(seed)
    s = shape
    x = T.Tensor(rng.standard_normal((s.tokens, s.d_model)).astype(np.float32), requires_grad=backward)
    router = T.Tensor(rng.normal(0, 0.02, (s.d_model, s.n_experts)).astype(np.float32), requires_grad=backward)
    experts = ExpertWeights(
        *(T.Tensor(rng.normal(0, 0.02, shp).astype(np.float32), requires_grad=backward)
          for shp in [(s.n_experts, s.d_model, s.hidden)] * 2 + [(s.n_experts, s.hidden, s.d_model)])
    )
    outputs: dict[str, np.ndarray] = {}
    rates: dict[str, float] = {}
    for path in DISPATCH_PATHS:
        fn = _DISPATCH[path]
        times = []
        for r in range(repeats + 1):
            t0 = time.perf_counter()
            if backward:
                decision = route(x, router, s.top_k)
                y = fn(x, decision, experts)
                T.backward(T.sum_(y))
            else:
                with T.no_grad():
                    decision = route(x, router, s.top_k)
                    y = fn(x, decision, experts)
            dt = time.perf_counter() - t0
            if r > 0:
                times.append(dt)
        outputs[path] = y.data
        rates[path] = s.tokens / statistics.median(times)
    ref = outputs["naive"]
    scale_ = max(float(np.abs(ref).max()), 1e-30)
    dev = {p: float(np.abs(outputs[p] - ref).max() / scale_) for p in DISPATCH_PATHS}
    ordering = sorted(DISPATCH_PATHS, key=lambda p: -rates[p])
    return BenchReport(asdict(s), repeats, rates, dev, ordering)
