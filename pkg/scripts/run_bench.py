#!/usr/bin/env python3
"""Attention MAC counts and peak tensor bytes: full attention against the
hierarchical scheme, with one-at-a-time sweeps over M, tree depth and beta."""

import argparse

from treekv.bench import (Scheme, bench_rows, count_attention_macs, formula_score_ops, full_score_ops,
                          modeled_macs, write_metrics)
from treekv.model import ModelConfig
from treekv.tree import schedule_for


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", default="1024,2048,4096,8192")
    ap.add_argument("--t-d", type=int, default=128)
    ap.add_argument("--chunk", type=int, default=128)
    ap.add_argument("--time-budget-mb", type=int, default=0, help="also time runs whose peak fits (0: no timing)")
    ap.add_argument("--out", default="runs/bench.csv")
    args = ap.parse_args()

    cfg = ModelConfig()
    rows = bench_rows(cfg, [int(x) for x in args.lengths.split(",")], args.t_d, args.chunk, 3, 2,
                      time_budget_bytes=args.time_budget_mb << 20)
    print(f"{'sweep':<9} {'T':>6} {'M':>2} {'h':>2} {'beta':>5} {'attn MACs':>14} {'x full':>7} {'peak MB':>8}")
    for r in rows:
        print(f"{r.task:<9} {r.length:>6} {r.shared_layers:>2} {r.depth:>2} {r.beta:>5.1f} "
              f"{r.attention_macs:>14,} {r.value:>7.2f} {r.peak_bytes / 2**20:>8.2f}")
    write_metrics(args.out, rows)

    # the paper-scale accounting point: T=8192 in 8 chunks of 1024, t_d=1024, alpha=(16,8,4)
    sched = schedule_for(3, 4)
    s_prime = modeled_macs(ModelConfig(), 8192, 1024, Scheme.HIERARCHICAL, 1024, sched).compressed_len
    print(f"\nmodeled score ops at T=8192, n=8, t_d=1024: hierarchical {formula_score_ops(8192, 8, 1024, s_prime):,}"
          f" vs full {full_score_ops(8192, 1024):,}")
    for m in (1, 2, 4):
        c = ModelConfig(n_layers=4, shared_layers=m)
        full = count_attention_macs(c, 8192, 1024, Scheme.FULL)
        hier = count_attention_macs(c, 8192, 1024, Scheme.HIERARCHICAL, 1024, sched)
        print(f"instrumented M={m}: full/hierarchical attention MACs = {full.attention / hier.attention:.2f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
