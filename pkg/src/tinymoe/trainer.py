"""Optimisation loop: AdamW, warmup + cosine schedule, accumulation, clipping, eval."""
from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import TokenWindowDataset, stream_batches
from .diagnostics import collect
from .model import DecoderModel, ModelConfig
from .objective import compose, next_token_ce, perplexity

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str | None):
        self.step = step
        self.last_good = last_good
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")


@dataclass
class TrainConfig:
    lr_max: float = 3e-4
    lr_min: float = 3e-5
    warmup_frac: float = 0.03
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 16
    grad_accum: int = 2
    total_steps: int = 26073
    eval_every: int = 250
    eval_at_epoch_end: bool = True
    eval_max_batches: int | None = None
    seed: int = 1337
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1 or self.grad_accum < 1 or self.eval_every < 1:
            raise ValueError("batch_size, grad_accum and eval_every must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.total_steps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine from lr_max to lr_min at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_max * step / w
    span = cfg.total_steps - w
    if span == 0:
        return cfg.lr_max
    progress = (step - w) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay on matrices except the tied embedding."""
    return len(shape) >= 2 and name != "embed"


class AdamW:
    def __init__(self, params: dict[str, T.Tensor], betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1,
                 decay_filter: Callable[[str, tuple[int, ...]], bool] = decays):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {k: decay_filter(k, p.shape) for k, p in params.items()}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
            if self.decay[k] and self.weight_decay:
                p.data *= p.data.dtype.type(1 - lr * self.weight_decay)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all grads jointly when their global L2 norm exceeds ``max_norm``."""
    sq = 0.0
    for k in grads:  # fixed key order keeps the sum deterministic
        sq += float(np.sum(np.square(grads[k], dtype=np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class RunRecord:
    points: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    best_step: int = -1
    seed: int = 0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    timing: list[dict] = field(default_factory=list)
    model: DecoderModel | None = field(default=None, repr=False, compare=False)

    @property
    def val_series(self) -> list[float]:
        return [p["ce"] for p in self.points]

    @property
    def best_series(self) -> list[float]:
        return list(np.minimum.accumulate(self.val_series)) if self.points else []


def evaluate(model: DecoderModel, ds: TokenWindowDataset, batch_size: int = 16, max_batches: int | None = None,
             routing: bool = True) -> tuple[float, list | None]:
    """Mean next-token CE with dropout off and no auxiliary terms."""
    total, n_tok = 0.0, 0
    per_layer: list[list] = [[] for _ in range(model.cfg.n_layers)] if model.cfg.is_moe else []
    with T.no_grad():
        for i, batch in enumerate(ds.windows[j:j + batch_size] for j in range(0, len(ds), batch_size)):
            if max_batches is not None and i >= max_batches:
                break
            out = model.forward(batch, train=False)
            n = batch.shape[0] * (batch.shape[1] - 1)
            total += next_token_ce(out.logits, batch).item() * n
            n_tok += n
            for layer, dec in zip(per_layer, out.router):
                layer.append(dec)
    ce = total / n_tok
    diag = [r.to_dict() for r in collect(per_layer)] if (routing and per_layer) else None
    return ce, diag


def save_checkpoint(path: Path, model: DecoderModel, opt: AdamW, tcfg: TrainConfig, step: int, best_val: float,
                    stream_state: dict) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(tcfg),
        "step": step,
        "best_val": best_val,
        "rng": {"seed": tcfg.seed, **stream_state},
        "adam_t": opt.t,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, p in model.params.items():
        arrays[f"w/{k}"] = p.data
        arrays[f"m/{k}"] = opt.m[k]
        arrays[f"v/{k}"] = opt.v[k]
    tmp = path.with_suffix(".tmp.npz")
    _write_npz(tmp, arrays)
    tmp.replace(path)


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # like np.savez, but with fixed entry timestamps so identical runs give identical files
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asarray(arr), allow_pickle=False)


def load_checkpoint(path: str | Path) -> tuple[DecoderModel, dict, dict]:
    """Returns (model, meta, optimizer moments {'m': ..., 'v': ...})."""
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        weights = {k[2:]: z[k] for k in z.files if k.startswith("w/")}
        moments = {
            "m": {k[2:]: z[k] for k in z.files if k.startswith("m/")},
            "v": {k[2:]: z[k] for k in z.files if k.startswith("v/")},
        }
    cfg = ModelConfig(**meta["model_config"])
    params = {k: T.Tensor(v, requires_grad=True, name=k, dtype=v.dtype) for k, v in weights.items()}
    return DecoderModel(cfg, params), meta, moments


def train_run(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    train_ds: TokenWindowDataset,
    val_ds: TokenWindowDataset,
    out_dir: str | Path | None = None,
    collect_routing: bool = True,
    on_eval: Callable[[dict], None] | None = None,
) -> RunRecord:
    if train_ds.vocab_size > model_cfg.vocab_size:
        raise ValueError(f"dataset vocab {train_ds.vocab_size} exceeds model vocab {model_cfg.vocab_size}")
    dtype = np.dtype(tcfg.dtype)
    model = DecoderModel(model_cfg, seed=tcfg.seed, dtype=dtype)
    opt = AdamW(model.params, tcfg.betas, tcfg.eps, tcfg.weight_decay)
    moe = model_cfg.moe
    lam_bal, lam_z = (moe.lambda_bal, moe.lambda_z) if moe else (0.0, 0.0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
        (out / "timing.jsonl").write_text("")
    record = RunRecord(seed=tcfg.seed, model_config=model_cfg.to_dict(), train_config=asdict(tcfg))
    last_good: str | None = None
    stream = stream_batches(train_ds, tcfg.batch_size, tcfg.seed)
    stream_state = {"epoch": 0, "batches_consumed": 0}
    tokens = 0
    window = {"ce": [], "bal": [], "z": [], "total": []}
    t_last, tok_last = time.perf_counter(), 0

    for step in range(1, tcfg.total_steps + 1):
        lr = lr_at(step, tcfg)
        model.zero_grad()
        epoch_end = False
        for micro in range(tcfg.grad_accum):
            epoch, last, batch = next(stream)
            stream_state = {"epoch": epoch, "batches_consumed": stream_state["batches_consumed"] + 1}
            epoch_end |= last
            fwd = model.forward(batch, train=True, rng_key=(tcfg.seed, step, micro))
            ce = next_token_ce(fwd.logits, batch)
            total, bd = compose(ce, fwd.router, lam_bal, lam_z)
            if not math.isfinite(bd.total):
                raise TrainingDiverged(step, last_good)
            T.backward(T.scale(total, 1.0 / tcfg.grad_accum))
            tokens += batch.shape[0] * (batch.shape[1] - 1)
            for k in window:
                window[k].append(getattr(bd, k))
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in model.params.items()}
        grads, grad_norm = clip_gradients(grads, tcfg.clip_norm)
        opt.step(lr, grads)

        if step % tcfg.eval_every == 0 or (epoch_end and tcfg.eval_at_epoch_end) or step == tcfg.total_steps:
            elapsed = time.perf_counter() - t_last
            val_ce, routing = evaluate(model, val_ds, tcfg.batch_size, tcfg.eval_max_batches, collect_routing)
            point = {
                "step": step,
                "tokens": tokens,
                "split": "val",
                "ce": val_ce,
                "ppl": perplexity(val_ce),
                "lr": lr,
                "grad_norm": grad_norm,
                "train_ce": float(np.mean(window["ce"])),
                "train_bal": float(np.mean(window["bal"])),
                "train_z": float(np.mean(window["z"])),
                "train_total": float(np.mean(window["total"])),
            }
            if routing is not None:
                point["routing"] = routing
            timing = {"step": step, "tok_per_s": (tokens - tok_last) / elapsed if elapsed > 0 else float("nan")}
            window = {k: [] for k in window}
            record.points.append(point)
            record.timing.append(timing)
            improved = val_ce < record.best_val
            if improved:
                record.best_val, record.best_step = val_ce, step
            if out is not None:
                with open(out / "metrics.jsonl", "a") as f:
                    f.write(json.dumps(point, sort_keys=True) + "\n")
                with open(out / "timing.jsonl", "a") as f:
                    f.write(json.dumps(timing) + "\n")
                if improved:
                    save_checkpoint(out / "best.npz", model, opt, tcfg, step, record.best_val, stream_state)
                    last_good = str(out / "best.npz")
            log.info("step %d tokens %d val_ce %.4f lr %.2e", step, tokens, val_ce, lr)
            if on_eval is not None:
                on_eval(point)
            t_last, tok_last = time.perf_counter(), tokens

    if out is not None:
        save_checkpoint(out / "last.npz", model, opt, tcfg, tcfg.total_steps, record.best_val, stream_state)
        summary = {
            "seed": tcfg.seed,
            "best_val": record.best_val,
            "best_ppl": perplexity(record.best_val),
            "best_step": record.best_step,
            "tokens": tokens,
            "eval_points": len(record.points),
            "model_config": record.model_config,
            "train_config": record.train_config,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    record.model = model
    return record


DEFAULT_SEEDS = (1337, 1338, 1339)


@dataclass
class SeedSummary:
    seeds: list[int]
    best_vals: list[float]
    mean: float
    std: float  # sample std (ddof=1)
    ppl_mean: float
    ppl_std: float


def run_seeds(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    train_ds: TokenWindowDataset,
    val_ds: TokenWindowDataset,
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    out_root: str | Path | None = None,
    **kwargs,
) -> tuple[list[RunRecord], SeedSummary]:
    """One run per seed, each under ``out_root/seed<seed>``, plus the mean/std row."""
    records = []
    for s in seeds:
        out = Path(out_root) / f"seed{s}" if out_root is not None else None
        records.append(train_run(model_cfg, replace(tcfg, seed=s), train_ds, val_ds, out, **kwargs))
    bests = np.array([r.best_val for r in records])
    ppls = np.exp(bests)
    ddof = 1 if len(bests) > 1 else 0
    summary = SeedSummary(list(seeds), bests.tolist(), float(bests.mean()), float(bests.std(ddof=ddof)),
                          float(ppls.mean()), float(ppls.std(ddof=ddof)))
    return records, summary
