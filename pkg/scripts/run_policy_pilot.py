#!/usr/bin/env python3
"""Compare branch-selection policies on the desk passkey task (same trained
model, accuracy averaged over several evaluation seeds)."""

import argparse
import logging

from treekv import experiments
from treekv.bench import MetricsRow, write_metrics
from treekv.tree import Policy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=str(experiments.DEFAULT_ROOT))
    ap.add_argument("--length", type=int, default=512)
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--policies", default="query_aware,random,always_right,always_left")
    ap.add_argument("--out", default="runs/policy_pilot.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trained = experiments.train_or_load(experiments.passkey_recipe(0), "passkey", args.root)
    res = experiments.policy_pilot(trained, args.length, args.samples,
                                   [int(s) for s in args.seeds.split(",")],
                                   [Policy(p) for p in args.policies.split(",")])
    for pol, acc in res.items():
        print(f"{pol:<14} mean accuracy {acc:.3f}")
    write_metrics(args.out, [MetricsRow("policy_pilot", args.length, acc, "mean_accuracy", pol)
                             for pol, acc in res.items()])
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
