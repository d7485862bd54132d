"""Desk-scale routing ablation: collapse, balancing and z-loss on the micro MoE."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as configlib
from .data import ByteTokenizer, build_windows, split_train_val, synthetic_stories, token_stream
from .model import DecoderModel
from .trainer import DEFAULT_SEEDS, evaluate, train_run

# name -> (top_k, lambda_bal, lambda_z)
VARIANTS = {
    "top1": (1, 0.0, 0.0),
    "top1_bal": (1, 1e-2, 0.0),
    "top1_bal_z": (1, 1e-2, 1e-3),
    "top2_bal": (2, 1e-2, 0.0),
    "top2_bal_z": (2, 1e-2, 1e-3),
}


@dataclass
class AblationResult:
    variant: str
    seed: int
    initial_ce: float  # untrained model, same seed
    first_ce: float
    final_ce: float
    busiest: list[float]  # per layer, at the final eval
    logz: list[float]
    entropy: list[float]

    @property
    def collapsed_layers(self) -> int:
        return sum(b > 0.9 for b in self.busiest)


def micro_corpus(n_docs: int = 500, window_len: int = 64, ratio: float = 0.95, shard_seed: int = 1337):
    """Byte-level synthetic corpus matching ``tinymoe prepare-data --synthetic``."""
    tok = ByteTokenizer()
    ds = build_windows(token_stream(synthetic_stories(n_docs, 0), tok), window_len, tok.vocab_size)
    return split_train_val(ds, ratio, shard_seed)


def run_variant(variant: str, seed: int, corpus=None, steps: int | None = None, out_dir: str | Path | None = None,
                config: str = "micro_moe") -> AblationResult:
    k, bal, z = VARIANTS[variant]
    cfg = configlib.load(config)
    moe = replace(cfg.model.moe, top_k=k, lambda_bal=bal, lambda_z=z)
    model_cfg = replace(cfg.model, moe=moe)
    tcfg = replace(cfg.train, seed=seed, **({"total_steps": steps} if steps else {}))
    train, val = corpus if corpus is not None else micro_corpus(window_len=model_cfg.context_len)
    init = DecoderModel(model_cfg, seed=seed, dtype=np.dtype(tcfg.dtype))
    initial_ce, _ = evaluate(init, val, tcfg.batch_size, tcfg.eval_max_batches, routing=False)
    rec = train_run(model_cfg, tcfg, train, val, out_dir)
    last = rec.points[-1]["routing"]
    return AblationResult(
        variant, seed, initial_ce, rec.points[0]["ce"], rec.points[-1]["ce"],
        [l["busiest_fraction"] for l in last], [l["mean_logz"] for l in last], [l["mean_entropy"] for l in last],
    )


def run_ablation(variants=("top1", "top1_bal", "top1_bal_z"), seeds=DEFAULT_SEEDS, steps: int | None = None,
                 out_root: str | Path | None = None, log=None) -> dict[str, list[AblationResult]]:
    corpus = micro_corpus()
    out: dict[str, list[AblationResult]] = {}
    for v in variants:
        for s in seeds:
            d = Path(out_root) / v / f"seed{s}" if out_root is not None else None
            r = run_variant(v, s, corpus, steps, d)
            if log:
                log(r)
            out.setdefault(v, []).append(r)
    return out
