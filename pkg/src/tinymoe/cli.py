"""Command-line entry point: ``tinymoe <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import config as configlib
from .bench import BenchShape, bench_dispatch
from .budget import BudgetConstraints, count_params, match_budget
from .data import (ByteTokenizer, SentencePieceTokenizer, build_windows, read_dataset, split_train_val,
                   synthetic_stories, token_stream, write_dataset)
from .diagnostics import collapse_detector, render_table
from .objective import perplexity
from .runs import FAMILIES, export_curves, format_summary, load_run, summarize
from .trainer import evaluate, load_checkpoint, train_run


class CLIError(Exception):
    pass


def _tokenizer(spec: str):
    return ByteTokenizer() if spec == "byte" else SentencePieceTokenizer(spec)


def _emit(obj, as_json: bool, text: str) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if as_json else text)


def cmd_prepare_data(args) -> None:
    tok = _tokenizer(args.tokenizer)
    if args.synthetic:
        docs = synthetic_stories(args.synthetic, args.synthetic_seed)
    else:
        if not args.input:
            raise CLIError("give --input files or --synthetic N")
        docs = []
        delim = args.doc_delimiter.encode().decode("unicode_escape")
        for path in args.input:
            docs.extend(d.strip() for d in Path(path).read_text(encoding="utf-8").split(delim) if d.strip())
    stream = token_stream(docs, tok, separator=not args.no_separator)
    ds = build_windows(stream, args.window_len, tok.vocab_size)
    train, val = split_train_val(ds, args.ratio, args.shard_seed)
    out = Path(args.out)
    write_dataset(out / "train.bin", train)
    write_dataset(out / "val.bin", val)
    meta = {
        "documents": len(docs), "stream_tokens": int(len(stream)), "window_len": args.window_len,
        "vocab_size": tok.vocab_size, "ratio": args.ratio, "shard_seed": args.shard_seed,
        "train_windows": len(train), "val_windows": len(val),
        "train_loss_tokens": train.loss_tokens, "val_loss_tokens": val.loss_tokens,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    _emit(meta, args.json, "\n".join(f"{k}: {v}" for k, v in meta.items()))


def _resolve_data(cfg: configlib.ExperimentConfig, args) -> tuple:
    train_path = args.train_data or cfg.data.train_path
    val_path = args.val_data or cfg.data.val_path
    if not train_path or not val_path:
        raise CLIError("dataset paths missing: set data.train_path/val_path or pass --train-data/--val-data")
    train, val = read_dataset(train_path, "train"), read_dataset(val_path, "val")
    if train.vocab_size > cfg.model.vocab_size or val.vocab_size > cfg.model.vocab_size:
        raise CLIError(f"dataset vocab {train.vocab_size} exceeds model vocab_size {cfg.model.vocab_size}")
    if train.window_len > cfg.model.context_len:
        raise CLIError(f"dataset window_len {train.window_len} exceeds model context_len {cfg.model.context_len}")
    return train, val


def cmd_train(args) -> None:
    cfg = configlib.load(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.steps is not None:
        cfg.train = dataclasses.replace(cfg.train, total_steps=args.steps)
    if args.out is not None:
        cfg.output = configlib.OutputConfig(args.out)
    train, val = _resolve_data(cfg, args)
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    t0 = time.perf_counter()
    rec = train_run(cfg.model, cfg.train, train, val, out_dir=out)
    wall = time.perf_counter() - t0
    summary = json.loads((out / "summary.json").read_text())
    (out / "wall_time.json").write_text(json.dumps({"seconds": wall}) + "\n")
    _emit({**summary, "wall_time_s": wall}, args.json,
          f"best val CE {rec.best_val:.4f} (ppl {summary['best_ppl']:.3f}) at step {rec.best_step}; "
          f"{summary['tokens']} loss tokens; {wall:.1f}s; outputs in {out}")


def cmd_eval(args) -> None:
    model, meta, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data, "val")
    ce, routing = evaluate(model, ds, args.batch_size, args.max_batches)
    result = {"checkpoint": str(args.checkpoint), "step": meta["step"], "ce": ce, "ppl": math.exp(ce)}
    if routing is not None:
        result["routing"] = routing
    text = f"val CE {ce:.4f}  ppl {math.exp(ce):.3f}  (step {meta['step']})"
    if routing is not None:
        text += "\n" + render_table([routing])
    _emit(result, args.json, text)


def _breakdown_row(name: str, cfg) -> dict:
    bd = count_params(cfg)
    return {"config": name, **dataclasses.asdict(bd)}


def cmd_count_params(args) -> None:
    rows = []
    for path in args.config:
        cfg = configlib.load(path).model
        if args.vocab is not None:
            cfg = dataclasses.replace(cfg, vocab_size=args.vocab)
        rows.append(_breakdown_row(Path(path).stem, cfg))
    m = lambda v: f"{v / 1e6:.2f}M"
    lines = [f"{'Model':<22}{'Embedding':>11}{'Non-FFN':>10}{'FFN/Expert':>12}{'Router':>10}{'Total / Active':>22}"]
    for r in rows:
        lines.append(
            f"{r['config']:<22}{m(r['embedding']):>11}{m(r['non_ffn_blocks']):>10}{m(r['ffn_or_expert_total']):>12}"
            f"{r['router']:>10}{m(r['total']) + ' / ' + m(r['active']):>22}"
        )
    _emit(rows, args.json, "\n".join(lines))


def cmd_match_budget(args) -> None:
    if args.count is None and args.from_config is None:
        raise CLIError("give --count N or --from-config CONFIG")
    target_count = args.count
    if target_count is None:
        bd = count_params(configlib.load(args.from_config).model)
        target_count = bd.active if args.target == "active" else bd.total
    cons = BudgetConstraints(
        vocab_size=args.vocab, n_layers=args.layers, head_dim=args.head_dim, n_kv_heads=args.n_kv_heads,
        context_len=args.context_len, d_model_granularity=args.granularity,
        d_model_min=args.d_min, d_model_max=args.d_max,
        ffn_ratio_min=args.ratio_min, ffn_ratio_max=args.ratio_max, ffn_ratio_step=args.ratio_step,
    )
    res = match_budget(args.target, target_count, cons)
    c = res.config
    rec = {
        "target": args.target, "target_count": target_count, "count": res.count, "rel_error": res.rel_error,
        "d_model": c.d_model, "n_query_heads": c.n_query_heads, "n_kv_heads": c.n_kv_heads,
        "head_dim": c.head_dim, "ffn_hidden": c.ffn_hidden, "candidates": res.candidates_searched,
    }
    _emit(rec, args.json,
          f"d_model={c.d_model} heads={c.n_query_heads}q/{c.n_kv_heads}kv ffn_hidden={c.ffn_hidden} "
          f"-> {res.count:,} params vs target {target_count:,} ({res.rel_error:.4%})")


def cmd_bench_dispatch(args) -> None:
    shape = BenchShape(args.tokens, args.d_model, args.experts, args.hidden, args.top_k)
    rep = bench_dispatch(shape, args.repeats, args.seed, args.backward)
    _emit(rep.to_dict(), args.json, rep.format())


def cmd_diagnose(args) -> None:
    run = Path(args.run)
    points = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines() if l.strip()]
    series = [p["routing"] for p in points if "routing" in p]
    if not series:
        raise CLIError(f"{run}: no routing diagnostics (dense run?)")
    verdicts = collapse_detector(series, args.threshold)
    out = {"layers": series[-1], "collapsed": verdicts, "logz_first": [l["mean_logz"] for l in series[0]]}
    text = render_table(series) + "\ncollapsed layers: " + (
        ", ".join(f"L{i}" for i, v in enumerate(verdicts) if v) or "none")
    _emit(out, args.json, text)


def cmd_export_curves(args) -> None:
    groups = {f: [load_run(p) for p in getattr(args, f)] for f in FAMILIES}
    res = export_curves(groups, args.out)
    b = res["best"]
    text = [f"wrote {args.out}" if args.out else "curves:"]
    for p in res["per_seed"]:
        text.append(f"seed {p['seed']}: active gap {p['active_gap']:.4f}  total gap {p['total_gap']:.4f}")
    text.append(f"active gap {b['active_gap'][0]:.4f} ± {b['active_gap'][1]:.4f}; "
                f"total gap {b['total_gap'][0]:.4f} ± {b['total_gap'][1]:.4f}")
    _emit({"per_seed": res["per_seed"], "best": b, "header": res["header"]}, args.json, "\n".join(text))


def cmd_summarize(args) -> None:
    rows = summarize([load_run(p) for p in args.runs])
    _emit(rows, args.json, format_summary(rows))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinymoe", description="Dense vs mixture-of-experts pretraining lab.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    p = add("prepare-data", cmd_prepare_data, "text -> token-window dataset files")
    p.add_argument("--input", nargs="*", default=[])
    p.add_argument("--synthetic", type=int, default=0, help="generate N synthetic stories instead of reading input")
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--window-len", type=int, default=512)
    p.add_argument("--ratio", type=float, default=0.95)
    p.add_argument("--shard-seed", type=int, default=1337)
    p.add_argument("--tokenizer", default="byte", help="'byte' or a SentencePiece model path")
    p.add_argument("--doc-delimiter", default="\\n\\n")
    p.add_argument("--no-separator", action="store_true")

    p = add("train", cmd_train, "train one model from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.add_argument("--train-data")
    p.add_argument("--val-data")

    p = add("eval", cmd_eval, "validation CE and routing diagnostics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-batches", type=int)

    p = add("count-params", cmd_count_params, "exact parameter breakdown")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--vocab", type=int)

    p = add("match-budget", cmd_match_budget, "search a dense width matching a parameter budget")
    p.add_argument("--target", choices=["active", "total"], required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--from-config")
    p.add_argument("--vocab", type=int, default=30008)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--n-kv-heads", type=int, default=2)
    p.add_argument("--context-len", type=int, default=512)
    p.add_argument("--granularity", type=int, default=32)
    p.add_argument("--d-min", type=int, default=64)
    p.add_argument("--d-max", type=int, default=1024)
    p.add_argument("--ratio-min", type=float, default=3.0)
    p.add_argument("--ratio-max", type=float, default=4.5)
    p.add_argument("--ratio-step", type=float, default=0.5)

    p = add("bench-dispatch", cmd_bench_dispatch, "throughput of naive/grouped/stacked dispatch")
    p.add_argument("--tokens", type=int, default=4096)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backward", action="store_true", help="time forward + backward")

    p = add("diagnose", cmd_diagnose, "per-layer routing table for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--threshold", type=float, default=0.9)

    p = add("export-curves", cmd_export_curves, "aligned val-loss and gap curves as CSV")
    for fam in FAMILIES:
        p.add_argument(f"--{fam.replace('_', '-')}", dest=fam, nargs="+", required=True)
    p.add_argument("--out")

    p = add("summarize", cmd_summarize, "mean ± std of best val loss per model")
    p.add_argument("runs", nargs="+")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (CLIError, configlib.ConfigParseError, ValueError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
