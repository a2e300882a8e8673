"""Desk-scale training and evaluation recipes shared by the CLI and scripts."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .compressor import chunk_bounds
from .config import RunConfig
from .decoder import generate
from .model import Transformer
from .tasks import QUESTION, byte_tokenize, gen_passkey_sample, split_context_running
from .trainer import (AdamState, Mode, Pipeline, TrainConfig, TrainSample, lm_window,
                      train_step)
from .tree import Branch, Policy

log = logging.getLogger(__name__)


def corpus_split(text: str, heldout_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    cut = int(len(ids) * (1 - heldout_fraction))
    return ids[:cut], ids[cut:]


def make_pipeline(run: RunConfig, model: Transformer, parallel: bool = False,
                  policy: str | None = None) -> Pipeline:
    return Pipeline(model, run.chunk_size, run.compression_schedule(), run.lm_split(),
                    run.query_split(), Policy(policy or run.tree.policy), parallel)


def passkey_sample(run: RunConfig, rng: np.random.Generator, total_len: int) -> tuple[TrainSample, object]:
    pk = gen_passkey_sample(total_len, run.data.key_digits, float(rng.random()),
                            int(rng.integers(2**31)), run.running_len)
    split = split_context_running(pk.full_text, run.running_len)
    ts = TrainSample(split.x_c, split.x_d, Mode.INSTRUCTION,
                     run.running_len - len(pk.answer), pk.query)
    return ts, pk


def short_passkey_doc(run: RunConfig, rng: np.random.Generator, length: int) -> TrainSample:
    """A passkey document short enough for the base model's own window,
    supervised on the answer only (no context; the key is in-window)."""
    tail = len(QUESTION) + run.data.key_digits + 8
    pk = gen_passkey_sample(length, run.data.key_digits, float(rng.random()),
                            int(rng.integers(2**31)), running_len=max(length // 2, tail))
    return TrainSample([], pk.full_text, Mode.INSTRUCTION, len(pk.full_text) - len(pk.answer))


Logger = Callable[[dict], None]


def pretrain_base(model: Transformer, run: RunConfig, train_ids: np.ndarray,
                  logger: Logger | None = None, state: AdamState | None = None, start_step: int = 0,
                  checkpoint: Callable[[int, AdamState], None] | None = None) -> AdamState:
    """Train every weight of the plain decoder on short windows (no context)."""
    pc = run.pretrain
    cfg = TrainConfig(lr=pc.lr, total_steps=pc.steps, batch_size=pc.batch_size,
                      warmup_ratio=pc.warmup_ratio, seed=run.seed, freeze="none",
                      clip_norm=run.train.clip_norm, betas=run.train.betas)
    model.set_freezing("none")
    pipe = make_pipeline(run, model)
    state = state or AdamState()
    for step in range(start_step + 1, pc.steps + 1):
        rng = np.random.default_rng([run.seed, 1, step])
        batch = []
        for _ in range(pc.batch_size):
            if rng.random() < pc.passkey_fraction:
                batch.append(short_passkey_doc(run, rng, pc.seq_len))
            else:
                batch.append(lm_window(train_ids, pc.seq_len, pc.seq_len, rng))
        m = train_step(batch, pipe, cfg, state, step, use_context=False)
        if logger:
            logger({"stage": "pretrain", "step": step, **m})
        if checkpoint and run.checkpoint_every and step % run.checkpoint_every == 0:
            checkpoint(step, state)
    return state


def inject_batch(run: RunConfig, rng: np.random.Generator, train_ids: np.ndarray) -> list[TrainSample]:
    batch = []
    for _ in range(run.train.batch_size):
        if rng.random() < run.data.passkey_fraction:
            batch.append(passkey_sample(run, rng, run.train_len)[0])
        else:
            batch.append(lm_window(train_ids, run.train_len, run.running_len, rng))
    return batch


def train_injected(model: Transformer, run: RunConfig, train_ids: np.ndarray,
                   logger: Logger | None = None, state: AdamState | None = None,
                   start_step: int = 0, checkpoint: Callable[[int, AdamState], None] | None = None,
                   policy: str | None = None) -> AdamState:
    """Train the cross-attention and upper layers with compressed context.

    A fresh run (no optimizer state) starts by re-deriving the cross-attention
    sublayers from the trained backbone."""
    if state is None:
        model.reset_cross()
    model.set_freezing(run.train.freeze)
    pipe = make_pipeline(run, model, policy=policy)
    state = state or AdamState()
    for step in range(start_step + 1, run.train.total_steps + 1):
        rng = np.random.default_rng([run.seed, 2, step])
        batch = inject_batch(run, rng, train_ids)
        m = train_step(batch, pipe, run.train, state, step)
        if logger:
            logger({"stage": "inject", "step": step, **m})
        if checkpoint and run.checkpoint_every and step % run.checkpoint_every == 0:
            checkpoint(step, state)
    return state


# -- evaluation ------------------------------------------------------------------

def eval_windows(heldout: np.ndarray, length: int, n: int, seed: int) -> list[np.ndarray]:
    if len(heldout) < length:
        raise ValueError(f"held-out text ({len(heldout)} tokens) shorter than window {length}")
    rng = np.random.default_rng([seed, length])
    starts = rng.integers(0, len(heldout) - length + 1, size=n)
    return [heldout[s: s + length] for s in starts]


@torch.no_grad()
def eval_nll(pipe: Pipeline, heldout: np.ndarray, length: int, running_len: int, windows: int,
             seed: int = 0, use_context: bool = True) -> float:
    """Mean NLL over the running text of `windows` held-out windows of `length`."""
    samples = []
    for w in eval_windows(heldout, length, windows, seed):
        w = w.tolist()
        samples.append(TrainSample(w[:-running_len], w[-running_len:], Mode.LM))
    losses = []
    for s in samples:
        losses.append(float(pipe.sample_losses([s], deterministic=True, use_context=use_context)[0]))
    return float(np.mean(losses))


@dataclass
class PasskeyResult:
    length: int
    accuracy: float
    by_decile: dict[int, float]
    audit: dict[int, tuple[int, int]] = field(default_factory=dict)   # level -> (hits, splits)

    def audit_rate(self, level: int) -> float:
        hits, n = self.audit.get(level, (0, 0))
        return hits / n if n else float("nan")


def _key_branch_audit(states, key_span, chunk_size, audit):
    ks, ke = key_span
    bounds = chunk_bounds(sum(st.tree.chunk_len for st in states), chunk_size)
    overlap = [max(0, min(e, ke) - max(s, ks)) for s, e in bounds]
    ci = int(np.argmax(overlap))
    tree = states[ci].tree
    off = bounds[ci][0]
    lo, hi = ks - off, ke - off
    for d in tree.decisions:
        if d.choice is None:
            continue
        in_left = max(0, min(d.left.end, hi) - max(d.left.start, lo))
        in_right = max(0, min(d.right.end, hi) - max(d.right.start, lo))
        if in_left == in_right == 0:
            continue
        want = Branch.LEFT if in_left >= in_right else Branch.RIGHT
        h, n = audit.get(d.level, (0, 0))
        audit[d.level] = (h + (d.choice is want), n + 1)


@torch.no_grad()
def eval_passkey(pipe: Pipeline, run: RunConfig, length: int, n_samples: int, seed: int = 0,
                 policy: Policy | None = None) -> PasskeyResult:
    rng = np.random.default_rng([seed, length, 7])
    hits = []
    deciles: dict[int, list[bool]] = {}
    audit: dict[int, tuple[int, int]] = {}
    for i in range(n_samples):
        position = (i + 0.5) / n_samples
        pk = gen_passkey_sample(length, run.data.key_digits, position,
                                int(rng.integers(2**31)), run.running_len)
        split = split_context_running(pk.full_text, run.running_len)
        ts = TrainSample(split.x_c, split.x_d, Mode.INSTRUCTION,
                         run.running_len - len(pk.answer), pk.query)
        states = pipe.compress(ts, deterministic=True, seed=(seed, i), policy=policy)
        out = generate(split.x_d[: ts.response_start], len(pk.answer), pipe.model, states)
        ok = out == pk.answer
        hits.append(ok)
        deciles.setdefault(min(9, int(position * 10)), []).append(ok)
        _key_branch_audit(states, pk.key_span, run.chunk_size, audit)
    return PasskeyResult(length, float(np.mean(hits)),
                         {k: float(np.mean(v)) for k, v in sorted(deciles.items())}, audit)
