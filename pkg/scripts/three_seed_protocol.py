#!/usr/bin/env python3
"""Three-seed dense-active / MoE / dense-total comparison and fairness gaps.

The bundled full-scale configs need the tokenized full corpus (see their data
section). For a desk-scale dry run use the micro configs:

    tinymoe prepare-data --synthetic 500 --window-len 64 --out data/micro
    python scripts/three_seed_protocol.py --micro --steps 300 --out runs/protocol

Each family is trained for seeds 1337/1338/1339 into <out>/<family>/seed<s>,
then the aligned curves go to <out>/curves.csv and a summary table is printed.
"""
import argparse
import dataclasses
from pathlib import Path

from tinymoe import config as configlib
from tinymoe.budget import BudgetConstraints, count_params, match_budget
from tinymoe.data import read_dataset
from tinymoe.runs import FAMILIES, export_curves, format_summary, load_run, summarize
from tinymoe.trainer import DEFAULT_SEEDS, run_seeds

FULL = {"dense_active": "full_dense_active", "moe": "full_moe", "dense_total": "full_dense_total"}


def micro_family_configs():
    """Micro MoE plus dense twins matched to its active and total counts."""
    moe = configlib.load("micro_moe")
    moe.model = dataclasses.replace(moe.model, moe=dataclasses.replace(moe.model.moe, top_k=2))
    bd = count_params(moe.model)
    m = moe.model
    cons = BudgetConstraints(vocab_size=m.vocab_size, n_layers=m.n_layers, head_dim=m.head_dim,
                             n_kv_heads=m.n_kv_heads, context_len=m.context_len, d_model_granularity=16,
                             d_model_min=32, d_model_max=256, ffn_ratio_min=2.0, ffn_ratio_max=6.0,
                             ffn_ratio_step=0.25)
    out = {"moe": moe}
    for fam, target in (("dense_active", bd.active), ("dense_total", bd.total)):
        cfg = dataclasses.replace(moe)
        res = match_budget(fam.split("_")[1], target, cons)
        cfg.model = dataclasses.replace(res.config, dropout_p=m.dropout_p)
        out[fam] = cfg
        print(f"{fam}: d_model {res.config.d_model} ffn {res.config.ffn_hidden} ({res.rel_error:.2%} off)")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--micro", action="store_true", help="use the micro MoE and budget-matched dense twins")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seeds", nargs="+", type=int, default=list(DEFAULT_SEEDS))
    ap.add_argument("--train-data")
    ap.add_argument("--val-data")
    ap.add_argument("--out", default="runs/protocol")
    args = ap.parse_args()

    cfgs = micro_family_configs() if args.micro else {f: configlib.load(FULL[f]) for f in FAMILIES}
    data = cfgs["moe"].data
    train = read_dataset(args.train_data or data.train_path, "train")
    val = read_dataset(args.val_data or data.val_path, "val")
    out = Path(args.out)
    for fam in FAMILIES:
        cfg = cfgs[fam]
        tcfg = dataclasses.replace(cfg.train, total_steps=args.steps) if args.steps else cfg.train
        _, summary = run_seeds(cfg.model, tcfg, train, val, seeds=args.seeds, out_root=out / fam)
        print(f"{fam}: best val {summary.mean:.4f} ± {summary.std:.4f} over seeds {summary.seeds}", flush=True)

    groups = {f: [load_run(out / f / f"seed{s}") for s in args.seeds] for f in FAMILIES}
    res = export_curves(groups, out / "curves.csv")
    print(format_summary(summarize([r for runs in groups.values() for r in runs])))
    b = res["best"]
    print(f"matched-active gap {b['active_gap'][0]:.4f} ± {b['active_gap'][1]:.4f}; "
          f"matched-total gap {b['total_gap'][0]:.4f} ± {b['total_gap'][1]:.4f}")


if __name__ == "__main__":
    main()
