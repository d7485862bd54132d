#!/usr/bin/env python3
"""Dispatch-path throughput on the default routed batch and a few larger ones.

    python scripts/bench_dispatch.py --repeats 5 [--backward]
"""
import argparse

from tinymoe.bench import BenchShape, bench_dispatch

SHAPES = [BenchShape(), BenchShape(tokens=8192), BenchShape(top_k=1), BenchShape(n_experts=8, hidden=512)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--backward", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for shape in SHAPES:
        rep = bench_dispatch(shape, args.repeats, args.seed, args.backward)
        print(f"\ntokens={shape.tokens} d_model={shape.d_model} experts={shape.n_experts} "
              f"hidden={shape.hidden} top_k={shape.top_k}")
        print(rep.format())


if __name__ == "__main__":
    main()
