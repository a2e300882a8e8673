"""Desk experiments with train-or-load caching.

A trained model is cached under ``<root>/<name>-<hash>/`` where the hash
covers the full run configuration, so changing any knob retrains. The cache
keeps the training wall-clock so a reloaded model still reports what it
cost to train.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, from_dict
from .model import Transformer
from .recipes import corpus_split, eval_nll, eval_passkey, make_pipeline, pretrain_base, train_injected
from .tasks import generate_corpus
from .tree import Policy

log = logging.getLogger(__name__)

DEFAULT_ROOT = Path("runs") / "acceptance"


def lm_recipe(seed: int = 0) -> RunConfig:
    """Desk default model on the motif corpus (no passkey samples)."""
    run = RunConfig(seed=seed)
    run.tree.policy = Policy.ALWAYS_RIGHT.value
    return run


def passkey_recipe(seed: int = 0) -> RunConfig:
    """Passkey-augmented recipe: the same base as `lm_recipe`, a longer
    injection stage with 512-token passkey samples in three quarters of each
    batch, QueryAware trees, and a leaf keep ratio of 1 so the key-bearing
    leaf is kept whole."""
    run = RunConfig(seed=seed)
    run.train.total_steps = 5000
    run.data.passkey_fraction = 0.75
    run.schedule.alpha_leaf = 1
    run.tree.policy = Policy.QUERY_AWARE.value
    return run


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_hash(run: RunConfig) -> str:
    return _digest(run.to_dict())


def base_hash(run: RunConfig) -> str:
    """Hash of exactly the settings the base-pretraining stage reads, so runs
    that differ only in the injection stage share one base model."""
    d = run.to_dict()
    data = {k: d["data"][k] for k in ("corpus_chars", "order", "topic_len", "heldout_fraction", "key_digits")}
    return _digest({"model": d["model"], "pretrain": d["pretrain"], "data": data, "seed": run.seed,
                    "clip_norm": d["train"]["clip_norm"], "betas": d["train"]["betas"]})


@dataclass
class Trained:
    model: Transformer
    run: RunConfig
    train_seconds: float   # base pretraining + injection, wall clock
    cached: bool
    path: Path


def corpus_ids(run: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    corpus = generate_corpus(run.seed, run.data.corpus_chars, run.data.order, run.data.topic_len)
    return corpus_split(corpus.text, run.data.heldout_fraction)


def _timed_logger(name: str, rows: list, log_every: int):
    t0 = time.time()

    def logger(rec):
        rows.append({**rec, "elapsed_s": round(time.time() - t0, 2)})
        if rec["step"] % log_every == 0:
            log.info("%s %s step %d loss %.4f", name, rec["stage"], rec["step"], rec["loss"])
    return logger


def base_or_load(run: RunConfig, root: Path | str = DEFAULT_ROOT,
                 log_every: int = 250) -> tuple[Transformer, float]:
    """The pretrained plain decoder for `run` and the seconds it took to train."""
    d = Path(root) / f"base-{base_hash(run)}"
    ckpt, meta = d / "base.ckpt", d / "timing.json"
    if ckpt.is_file() and meta.is_file():
        model, _ = load_checkpoint(ckpt)
        log.info("loaded cached base from %s", d)
        return model, float(json.loads(meta.read_text())["train_seconds"])
    d.mkdir(parents=True, exist_ok=True)
    train_ids, _ = corpus_ids(run)
    model = Transformer(run.model, seed=run.seed)
    rows: list[dict] = []
    t0 = time.time()
    pretrain_base(model, run, train_ids, _timed_logger("base", rows, log_every))
    seconds = time.time() - t0
    save_checkpoint(model, ckpt, run.to_dict(), {"stage": "pretrain", "seed": run.seed})
    (d / "train_log.json").write_text(json.dumps(rows))
    meta.write_text(json.dumps({"train_seconds": seconds}))
    # continue from the stored (float32) weights so a fresh and a cached base agree
    return load_checkpoint(ckpt)[0], seconds


def train_or_load(run: RunConfig, name: str, root: Path | str = DEFAULT_ROOT,
                  log_every: int = 250) -> Trained:
    """Return the trained model for `run`, training (and caching) it if needed.

    The recorded training time always includes the base pretraining, even when
    the base itself came from the cache."""
    d = Path(root) / f"{name}-{run_hash(run)}"
    ckpt, meta = d / "model.ckpt", d / "timing.json"
    if ckpt.is_file() and meta.is_file():
        model, _ = load_checkpoint(ckpt)
        info = json.loads(meta.read_text())
        log.info("loaded cached %s from %s", name, d)
        return Trained(model, run, float(info["train_seconds"]), True, d)

    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(run.to_dict(), indent=2, default=str))
    model, base_seconds = base_or_load(run, root, log_every)
    train_ids, _ = corpus_ids(run)
    rows: list[dict] = []
    t0 = time.time()
    train_injected(model, run, train_ids, _timed_logger(name, rows, log_every))
    inject_seconds = time.time() - t0
    save_checkpoint(model, ckpt, run.to_dict(), {"stage": "inject", "seed": run.seed})
    (d / "train_log.json").write_text(json.dumps(rows))
    seconds = base_seconds + inject_seconds
    meta.write_text(json.dumps({"train_seconds": seconds, "pretrain_seconds": base_seconds,
                                "inject_seconds": inject_seconds}))
    return Trained(model, run, seconds, False, d)


# -- experiments -------------------------------------------------------------------

@dataclass
class ExtrapolationRow:
    length: int
    nll: float
    nll_no_context: float

    @property
    def ppl(self) -> float:
        return math.exp(self.nll)

    @property
    def ppl_no_context(self) -> float:
        return math.exp(self.nll_no_context)

    @property
    def gain(self) -> float:
        """Relative NLL improvement of the context over the no-context ablation."""
        return 1.0 - self.nll / self.nll_no_context


def extrapolation(trained: Trained, lengths: Sequence[int] = (512, 1024, 2048, 4096, 8192),
                  windows: int | None = None) -> list[ExtrapolationRow]:
    """Held-out NLL of the running text with and without compressed context,
    on the same windows at every length."""
    run = trained.run
    _, heldout = corpus_ids(run)
    pipe = make_pipeline(run, trained.model)
    n = windows or run.eval.windows
    rows = []
    for L in lengths:
        a = eval_nll(pipe, heldout, L, run.running_len, n, run.seed, use_context=True)
        b = eval_nll(pipe, heldout, L, run.running_len, n, run.seed, use_context=False)
        rows.append(ExtrapolationRow(L, a, b))
        log.info("length %d: nll %.4f (no context %.4f)", L, a, b)
    return rows


@dataclass
class PasskeyReport:
    accuracy: dict[int, float]
    audit: dict[int, dict[int, float]] = field(default_factory=dict)   # length -> level -> rate
    control: float = float("nan")


def passkey(trained: Trained, lengths: Sequence[int] = (512, 2048), samples: int = 200,
            seed: int = 0, control: bool = True) -> PasskeyReport:
    """Exact-match accuracy per length, the QueryAware branch audit, and the
    same evaluation on an untrained model of the same shape."""
    run = trained.run
    pipe = make_pipeline(run, trained.model)
    report = PasskeyReport({})
    for L in lengths:
        res = eval_passkey(pipe, run, L, samples, seed)
        report.accuracy[L] = res.accuracy
        report.audit[L] = {lv: res.audit_rate(lv) for lv in sorted(res.audit)}
        log.info("passkey %d: accuracy %.3f audit %s", L, res.accuracy, report.audit[L])
    if control:
        fresh = make_pipeline(run, Transformer(run.model, seed=run.seed))
        report.control = eval_passkey(fresh, run, lengths[0], samples, seed).accuracy
    return report


def policy_pilot(trained: Trained, length: int = 512, samples: int = 100,
                 seeds: Sequence[int] = (0, 1, 2),
                 policies: Sequence[Policy] = (Policy.QUERY_AWARE, Policy.RANDOM)) -> dict[str, float]:
    """Mean passkey accuracy over `seeds` for each branch-selection policy."""
    run = trained.run
    pipe = make_pipeline(run, trained.model)
    out = {}
    for pol in policies:
        accs = [eval_passkey(pipe, run, length, samples, s, policy=pol).accuracy for s in seeds]
        out[pol.value] = float(np.mean(accs))
        log.info("policy %s: accuracies %s", pol.value, accs)
    return out


def load_run(path) -> RunConfig:
    return from_dict(json.loads(Path(path).read_text()))
