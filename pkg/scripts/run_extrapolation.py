#!/usr/bin/env python3
"""Train (or load) the desk default model on the motif corpus and report
running-text perplexity with and without compressed context at growing lengths."""

import argparse
import logging
import math

from treekv import experiments
from treekv.bench import MetricsRow, write_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=str(experiments.DEFAULT_ROOT), help="model cache directory")
    ap.add_argument("--lengths", default="512,1024,2048,4096,8192")
    ap.add_argument("--windows", type=int, default=None, help="held-out windows per length")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/extrapolation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trained = experiments.train_or_load(experiments.lm_recipe(args.seed), "lm", args.root)
    rows = experiments.extrapolation(trained, [int(x) for x in args.lengths.split(",")], args.windows)
    print(f"trained in {trained.train_seconds / 60:.1f} min{' (cached)' if trained.cached else ''}")
    print(f"{'length':>7} {'ppl':>8} {'ppl no ctx':>10} {'NLL gain':>9}")
    for r in rows:
        print(f"{r.length:>7} {r.ppl:>8.3f} {r.ppl_no_context:>10.3f} {100 * r.gain:>8.2f}%")
    write_metrics(args.out, [m for r in rows for m in (
        MetricsRow("ppl", r.length, r.ppl, "perplexity", "hierarchical", seed=args.seed),
        MetricsRow("ppl_no_context", r.length, r.ppl_no_context, "perplexity", "none", seed=args.seed),
        MetricsRow("nll_gain", r.length, r.gain, "relative_nll_gain", seed=args.seed))])
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
