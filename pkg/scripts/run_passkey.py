#!/usr/bin/env python3
"""Train (or load) the passkey-augmented model and report exact-match accuracy
per length, the QueryAware key-branch audit and an untrained control."""

import argparse
import logging

from treekv import experiments
from treekv.bench import MetricsRow, write_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=str(experiments.DEFAULT_ROOT))
    ap.add_argument("--lengths", default="512,2048")
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/passkey.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trained = experiments.train_or_load(experiments.passkey_recipe(args.seed), "passkey", args.root)
    rep = experiments.passkey(trained, [int(x) for x in args.lengths.split(",")], args.samples)
    print(f"trained in {trained.train_seconds / 60:.1f} min{' (cached)' if trained.cached else ''}")
    rows = []
    for L, acc in rep.accuracy.items():
        audit = " ".join(f"L{lv}={r:.2f}" for lv, r in rep.audit[L].items())
        print(f"length {L:>5}: accuracy {acc:.3f}   key-branch audit {audit}")
        rows.append(MetricsRow("passkey", L, acc, "accuracy", "query_aware", seed=args.seed))
        rows += [MetricsRow(f"branch_audit_level_{lv}", L, r, "key_branch_rate", depth=lv, seed=args.seed)
                 for lv, r in rep.audit[L].items()]
    print(f"untrained control: accuracy {rep.control:.3f}")
    rows.append(MetricsRow("passkey_untrained", min(rep.accuracy), rep.control, "accuracy", seed=args.seed))
    write_metrics(args.out, rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
