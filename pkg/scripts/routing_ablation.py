#!/usr/bin/env python3
"""Micro routing ablation: top-1 collapse, Switch balancing and router z-loss.

    python scripts/routing_ablation.py --out runs/ablation
    python scripts/routing_ablation.py --variants top1_bal top2_bal top2_bal_z --seeds 1337

Writes every run directory under --out plus ablation.json with the final
per-layer busiest fraction, log-z and entropy for each (variant, seed).
"""
import argparse
import dataclasses
import json
from pathlib import Path

from tinymoe.ablation import VARIANTS, run_ablation
from tinymoe.trainer import DEFAULT_SEEDS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variants", nargs="+", default=["top1", "top1_bal", "top1_bal_z"], choices=sorted(VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(DEFAULT_SEEDS))
    ap.add_argument("--steps", type=int, help="override the micro config's total_steps")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    def log(r):
        print(f"{r.variant:<12} seed {r.seed}  val CE {r.initial_ce:.3f} -> {r.final_ce:.3f}  "
              f"busiest {' '.join(f'{b:.2f}' for b in r.busiest)}  logz {' '.join(f'{z:.3f}' for z in r.logz)}",
              flush=True)

    res = run_ablation(args.variants, args.seeds, args.steps, args.out, log=log)
    print()
    for v, runs in res.items():
        collapsed = sum(r.collapsed_layers > len(r.busiest) / 2 for r in runs)
        print(f"{v:<12} majority-collapsed seeds {collapsed}/{len(runs)}  "
              f"max busiest {max(max(r.busiest) for r in runs):.2f}")
    out = Path(args.out) / "ablation.json"
    out.write_text(json.dumps({v: [dataclasses.asdict(r) for r in runs] for v, runs in res.items()}, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
