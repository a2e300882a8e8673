"""Command-line front end: gen | train | eval-ppl | eval-passkey | bench | inspect-tree.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .compressor import chunk_bounds, node_repr
from .config import RunConfig, load_config
from .model import Transformer
from .numerics import ConfigError, NumericalError, UsageError
from .recipes import corpus_split, eval_nll, eval_passkey, make_pipeline, pretrain_base, train_injected
from .tasks import (DataError, byte_tokenize, gen_passkey_sample, generate_corpus, write_passkey_jsonl)
from .trainer import AdamState
from .tree import Policy, ReprCallbacks, build_tree, tree_to_json

log = logging.getLogger("treekv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PPL_DASH = 100.0


def _out_dir(run: RunConfig) -> Path:
    return Path(run.paths.output_dir)


def _path(run: RunConfig, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else _out_dir(run) / p


def _writable(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise DataError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _read_corpus(run: RunConfig, override: str | None) -> str:
    path = Path(override) if override else _path(run, run.paths.corpus)
    if not path.is_file():
        raise DataError(f"corpus not found: {path} (run `treekv gen` first)")
    text = path.read_text(encoding="utf-8")
    if not text:
        raise DataError(f"corpus {path} is empty")
    return text


def _load_model(run: RunConfig, checkpoint: str | None) -> Transformer:
    if checkpoint is None:
        return Transformer(run.model, seed=run.seed)
    model, _ = load_checkpoint(checkpoint)
    if model.cfg != run.model:
        log.warning("checkpoint model config differs from the run config; using the checkpoint's")
    run.model = model.cfg
    return model


# -- commands ---------------------------------------------------------------------

def cmd_gen(run: RunConfig, args) -> int:
    corpus_path = _writable(_path(run, run.paths.corpus), args.force)
    pk_path = _writable(_path(run, run.paths.passkey), args.force)
    corpus = generate_corpus(run.seed, run.data.corpus_chars, run.data.order, run.data.topic_len)
    corpus_path.write_text(corpus.text, encoding="utf-8")
    rng = np.random.default_rng([run.seed, 3])
    samples = [gen_passkey_sample(run.train_len, run.data.key_digits, float(rng.random()),
                                  int(rng.integers(2**31)), run.running_len)
               for _ in range(run.data.passkey_samples)]
    write_passkey_jsonl(pk_path, samples)
    print(f"wrote {corpus_path} ({len(corpus.text)} chars) and {pk_path} ({len(samples)} samples)")
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    out = _out_dir(run)
    model = Transformer(run.model, seed=run.seed)
    total = model.n_params()
    model.set_freezing(run.train.freeze)
    if args.dry_run:
        print(json.dumps({"params": total, "trainable_after_injection": model.n_params(True),
                          "config": run.to_dict()}, indent=2, default=str))
        return EXIT_OK
    train_ids, _ = corpus_split(_read_corpus(run, args.corpus), run.data.heldout_fraction)
    stage, start, state = "pretrain", 0, None
    if args.resume:
        model, manifest, state = load_checkpoint(args.resume, with_optimizer=True)
        stage = manifest["extra"].get("stage", "inject")
        start = int(manifest["extra"].get("step", state.step))
        log.info("resuming %s at step %d", stage, start)
    elif args.stage == "inject":
        if not args.base:
            raise ConfigError("--stage inject needs --base CHECKPOINT")
        model, _ = load_checkpoint(args.base)
        stage = "inject"

    log_path = out / "train_log.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    new_log = not (args.resume and log_path.exists())
    f = open(log_path, "w" if new_log else "a", newline="")
    writer = csv.DictWriter(f, fieldnames=["stage", "step", "loss", "lr", "grad_norm", "elapsed_s"])
    if new_log:
        writer.writeheader()
    t0 = time.time()

    def logger(rec):
        writer.writerow({**rec, "elapsed_s": round(time.time() - t0, 3)})
        f.flush()
        if rec["step"] % 50 == 0:
            log.info("%s step %d loss %.4f", rec["stage"], rec["step"], rec["loss"])

    def saver(stage_name):
        def save(step, st):
            path = out / f"ckpt_{stage_name}_{step}.ckpt"
            save_checkpoint(model, path, run.to_dict(), {"stage": stage_name, "step": step, "seed": run.seed},
                            st)
        return save

    try:
        if stage == "pretrain" and args.stage in ("all", "pretrain"):
            state = pretrain_base(model, run, train_ids, logger, state=state, start_step=start,
                                  checkpoint=saver("pretrain"))
            save_checkpoint(model, out / "base.ckpt", run.to_dict(),
                            {"stage": "pretrain", "step": run.pretrain.steps, "seed": run.seed})
            stage, start, state = "inject", 0, None
        if stage == "inject" and args.stage in ("all", "inject"):
            state = train_injected(model, run, train_ids, logger, state=state, start_step=start,
                                   checkpoint=saver("inject"))
            save_checkpoint(model, _path(run, run.paths.checkpoint), run.to_dict(),
                            {"stage": "inject", "step": run.train.total_steps, "seed": run.seed}, state)
    finally:
        f.close()
    print(f"training finished; log at {log_path}")
    return EXIT_OK


def _fmt_ppl(nll: float) -> str:
    ppl = math.exp(nll)
    return "-" if ppl > PPL_DASH else f"{ppl:.3f}"


def cmd_eval_ppl(run: RunConfig, args) -> int:
    model = _load_model(run, args.checkpoint)
    _, heldout = corpus_split(_read_corpus(run, args.corpus), run.data.heldout_fraction)
    pipe = make_pipeline(run, model, args.parallel)
    rows = []
    lengths = args.lengths or run.eval.lengths
    print(f"{'length':>8} {'ppl':>10} {'ppl_no_ctx':>11}")
    for L in lengths:
        if L < run.running_len:
            log.warning("skipping eval length %d < running_len %d", L, run.running_len)
            continue
        t = time.perf_counter()
        nll = eval_nll(pipe, heldout, L, run.running_len, run.eval.windows, run.seed, use_context=True)
        ms = 1e3 * (time.perf_counter() - t)
        base = eval_nll(pipe, heldout, L, run.running_len, run.eval.windows, run.seed, use_context=False)
        rows.append(bench.MetricsRow("ppl", L, math.exp(nll), "perplexity", "hierarchical",
                                     run.running_len, run.model.shared_layers, run.tree.depth,
                                     run.schedule.alpha_leaf, prefill_ms=ms, seed=run.seed))
        rows.append(bench.MetricsRow("ppl_no_context", L, math.exp(base), "perplexity", "none",
                                     run.running_len, seed=run.seed))
        print(f"{L:>8} {_fmt_ppl(nll):>10} {_fmt_ppl(base):>11}")
    path = _writable(_out_dir(run) / "eval_ppl.csv", True)
    bench.write_metrics(path, rows)
    return EXIT_OK


def cmd_eval_passkey(run: RunConfig, args) -> int:
    model = _load_model(run, args.checkpoint)
    pipe = make_pipeline(run, model, args.parallel, policy=args.policy)
    rows = []
    for L in args.lengths or run.eval.passkey_lengths:
        t = time.perf_counter()
        res = eval_passkey(pipe, run, L, args.samples or run.eval.passkey_samples, run.seed)
        ms = 1e3 * (time.perf_counter() - t)
        rows.append(bench.MetricsRow("passkey", L, res.accuracy, "accuracy", pipe.instruction_policy.value,
                                     run.running_len, run.model.shared_layers, run.tree.depth,
                                     run.schedule.alpha_leaf, prefill_ms=ms, seed=run.seed))
        for dec, acc in res.by_decile.items():
            rows.append(bench.MetricsRow(f"passkey_decile_{dec}", L, acc, "accuracy", seed=run.seed))
        for level in sorted(res.audit):
            rows.append(bench.MetricsRow(f"branch_audit_level_{level}", L, res.audit_rate(level),
                                         "key_branch_rate", depth=level, seed=run.seed))
        audit = ", ".join(f"L{lv}={res.audit_rate(lv):.2f}" for lv in sorted(res.audit))
        print(f"length {L}: accuracy {res.accuracy:.3f}  branch audit {audit}")
    bench.write_metrics(_writable(_out_dir(run) / "eval_passkey.csv", True), rows)
    return EXIT_OK


def cmd_bench(run: RunConfig, args) -> int:
    weights = _load_model(run, args.checkpoint) if args.checkpoint else None
    if args.parallel:
        log.info("bench timing runs sequentially; --parallel is ignored for stable numbers")
    rows = bench.bench_rows(run.model, args.lengths or run.eval.lengths, args.t_d or run.running_len,
                            run.chunk_size, run.tree.depth, run.schedule.alpha_leaf, run.tree.min_len,
                            run.seed, weights, args.time_budget_mb << 20, args.decode_tokens)
    bench.write_metrics(_writable(_out_dir(run) / "bench.csv", True), rows)
    print(f"{'task':<10} {'T':>6} {'M':>2} {'h':>2} {'beta':>5} {'attn MACs':>14} {'x full':>7} "
          f"{'peak MB':>8} {'prefill ms':>10}")
    for r in rows:
        print(f"{r.task:<10} {r.length:>6} {r.shared_layers:>2} {r.depth:>2} {r.beta:>5.1f} "
              f"{r.attention_macs:>14,} {r.value:>7.2f} {r.peak_bytes / 2**20:>8.1f} {r.prefill_ms:>10.1f}")
    return EXIT_OK


def cmd_inspect_tree(run: RunConfig, args) -> int:
    path = Path(args.text)
    if not path.is_file():
        raise DataError(f"text file not found: {path}")
    ids = byte_tokenize(path.read_bytes())
    if not ids:
        raise DataError("text is empty")
    if args.query is None and not args.lm_mode:
        raise ConfigError("inspect-tree needs --query TEXT or --lm-mode")
    schedule = run.compression_schedule()
    if args.lm_mode:
        policy, split, fns = Policy.ALWAYS_RIGHT, run.lm_split(), None
    else:
        model = _load_model(run, args.checkpoint)
        policy, split = Policy.QUERY_AWARE, run.query_split()
        qvec = node_repr(byte_tokenize(args.query), model).numpy()
    trees = []
    for i, (s, e) in enumerate(chunk_bounds(len(ids), run.chunk_size)):
        if policy is Policy.QUERY_AWARE:
            chunk = ids[s:e]
            fns = ReprCallbacks(node=lambda a, b, c=chunk: node_repr(c[a:b], model).numpy(),
                                query=lambda: qvec)
        tree = build_tree(e - s, run.tree.depth, split, policy, fns, deterministic=True, chunk_index=i)
        trees.append(tree_to_json(tree, schedule))
    dump = {"chunk_size": run.chunk_size, "policy": policy.value, "n_tokens": len(ids), "trees": trees}
    text = json.dumps(dump, indent=2)
    if args.json_out:
        _writable(Path(args.json_out), args.force).write_text(text)
    print(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    """Global flags, accepted before or after the subcommand."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="global seed (overrides config)")
    p.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--output", default=d(None), help="output directory (overrides paths.output_dir)")
    p.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    p.add_argument("--parallel", action="store_true", default=d(False), help="compress chunks concurrently")
    p.add_argument("--log-level", default=d("INFO"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, suppress=True)
    p = argparse.ArgumentParser(prog="treekv", description=__doc__.splitlines()[0])
    _add_common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write the motif corpus and a passkey set")

    t = sub.add_parser("train", parents=[common], help="pretrain the base model, then train injection")
    t.add_argument("--corpus")
    t.add_argument("--dry-run", action="store_true", help="validate config, print parameter count")
    t.add_argument("--resume", metavar="CKPT", help="continue from a periodic checkpoint")
    t.add_argument("--stage", choices=["all", "pretrain", "inject"], default="all")
    t.add_argument("--base", metavar="CKPT", help="base checkpoint for --stage inject")

    e = sub.add_parser("eval-ppl", parents=[common], help="held-out perplexity vs input length")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--lengths", type=_int_list)

    k = sub.add_parser("eval-passkey", parents=[common], help="passkey retrieval accuracy")
    k.add_argument("--checkpoint", help="omit for the untrained control")
    k.add_argument("--lengths", type=_int_list)
    k.add_argument("--samples", type=int)
    k.add_argument("--policy", choices=[x.value for x in Policy])

    b = sub.add_parser("bench", parents=[common], help="attention MAC / memory / time sweeps")
    b.add_argument("--checkpoint")
    b.add_argument("--lengths", type=_int_list)
    b.add_argument("--t-d", type=int)
    b.add_argument("--time-budget-mb", type=int, default=1024,
                   help="skip wall-clock timing when counted peak bytes exceed this")
    b.add_argument("--decode-tokens", type=int, default=0)

    i = sub.add_parser("inspect-tree", parents=[common], help="dump the context trees of a text as JSON")
    i.add_argument("--text", required=True)
    g = i.add_mutually_exclusive_group()
    g.add_argument("--query")
    g.add_argument("--lm-mode", action="store_true")
    i.add_argument("--checkpoint")
    i.add_argument("--json-out")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval-ppl": cmd_eval_ppl, "eval-passkey": cmd_eval_passkey,
            "bench": cmd_bench, "inspect-tree": cmd_inspect_tree}


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output is not None:
        overrides.append(f"paths.output_dir={json.dumps(args.output)}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(message)s")
    torch.manual_seed(0)
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](run, args)
    except (ConfigError, UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e} (periodic checkpoints are kept)", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
