"""Masked LM loss, AdamW with warmup + cosine decay, freezing, train steps."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .compressor import ChunkState, compress_context
from .decoder import CrossContext, forward
from .model import Transformer
from .numerics import ConfigError, NumericalError, UsageError
from .tasks import DataError
from .tree import CompressionSchedule, Policy, SplitParams


class Mode(enum.Enum):
    LM = "lm"
    INSTRUCTION = "instruction"


@dataclass
class TrainSample:
    x_c: list[int]
    x_d: list[int]
    mode: Mode = Mode.LM
    response_start: int | None = None
    query: list[int] | None = None

    def __post_init__(self):
        if self.mode is Mode.INSTRUCTION:
            if self.response_start is None or not 0 < self.response_start < len(self.x_d):
                raise DataError(f"response_start {self.response_start} outside (0, {len(self.x_d)})")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.01
    total_steps: int = 2500
    epochs: int = 1
    batch_size: int = 16
    grad_accum: int = 1
    clip_norm: float = 1.0
    seed: int = 0
    freeze: str = "shared"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.batch_size % self.grad_accum:
            raise ConfigError("batch_size must be divisible by grad_accum")
        if self.freeze not in ("none", "shared"):
            raise ConfigError(f"unknown freezing policy {self.freeze!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def target_mask(sample: TrainSample) -> list[bool]:
    """Mask over target positions 1..|x_d|-1 of the running text."""
    n = len(sample.x_d)
    if n < 2:
        raise DataError("running text needs at least two tokens")
    if sample.mode is Mode.LM:
        return [True] * (n - 1)
    rs = sample.response_start
    if rs is None or not 0 < rs < n:
        raise DataError(f"response_start {rs} outside (0, {n})")
    return [t >= rs for t in range(1, n)]


def lm_loss(logits: torch.Tensor, targets, mask) -> torch.Tensor:
    """Mean negative log-likelihood of `targets` over the masked positions."""
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=logits.device)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise UsageError(f"shape mismatch: logits {tuple(logits.shape)}, "
                         f"targets {tuple(targets.shape)}, mask {tuple(mask.shape)}")
    count = mask.sum(-1)
    if bool((count == 0).any()):
        raise UsageError("loss mask selects no target")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum(-1) / count


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over warmup_ratio of the run, then cosine decay to zero."""
    warm = int(round(cfg.warmup_ratio * cfg.total_steps))
    if warm and step <= warm:
        return cfg.lr * step / warm
    span = max(1, cfg.total_steps - warm)
    frac = min(1.0, (step - warm) / span)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
               cfg: TrainConfig, step: int, lr: float | None = None) -> float:
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    if step < 1:
        raise UsageError("Adam steps are 1-based")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.betas
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if cfg.weight_decay:
            p.mul_(1 - lr * cfg.weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    state.step = step
    return lr


@dataclass
class Pipeline:
    """Model plus the tree/compression settings that turn samples into logits."""
    model: Transformer
    chunk_size: int = 128
    schedule: CompressionSchedule = field(default_factory=lambda: CompressionSchedule((8, 4, 2)))
    lm_split: SplitParams = field(default_factory=lambda: SplitParams(gamma=5.0))
    query_split: SplitParams = field(default_factory=lambda: SplitParams(gamma=10.0))
    instruction_policy: Policy = Policy.QUERY_AWARE
    parallel: bool = False

    def compress(self, sample: TrainSample, deterministic: bool, seed=0,
                 policy: Policy | None = None) -> list[ChunkState]:
        if sample.mode is Mode.LM:
            pol, split = policy or Policy.ALWAYS_RIGHT, self.lm_split
        else:
            pol, split = policy or self.instruction_policy, self.query_split
        query = sample.query
        if query is None and sample.mode is Mode.INSTRUCTION:
            query = sample.x_d[: sample.response_start]
        return compress_context(sample.x_c, self.model, self.chunk_size, self.schedule, split, pol,
                                query_tokens=query, deterministic=deterministic, seed=seed,
                                parallel=self.parallel)

    def sample_losses(self, samples: Sequence[TrainSample], deterministic: bool = False,
                      seeds: Sequence | None = None, use_context: bool = True,
                      policy: Policy | None = None) -> torch.Tensor:
        """Per-sample masked mean NLL, batched over samples sharing |x_d|."""
        seeds = seeds if seeds is not None else [0] * len(samples)
        out: list[torch.Tensor | None] = [None] * len(samples)
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            groups.setdefault(len(s.x_d), []).append(i)
        cfg = self.model.cfg
        for idx in groups.values():
            ids = torch.as_tensor([samples[i].x_d for i in idx], dtype=torch.long)
            ctx = None
            if use_context:
                states = [self.compress(samples[i], deterministic, seeds[i], policy) for i in idx]
                if any(states):
                    ctx = CrossContext.pack(states, cfg.shared_layers, cfg.d_model)
            logits = forward(ids, ctx, self.model)
            masks = [target_mask(samples[i]) for i in idx]
            losses = lm_loss(logits[:, :-1], ids[:, 1:], masks)
            for j, i in enumerate(idx):
                out[i] = losses[j]
        return torch.stack(out)


def trainable(model: Transformer) -> dict[str, torch.nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def sample_seed(seed: int, step: int, index: int) -> tuple[int, int, int]:
    return (seed, step, index)


def train_step(batch: Sequence[TrainSample], pipeline: Pipeline, cfg: TrainConfig,
               state: AdamState, step: int, use_context: bool = True) -> dict:
    """One optimizer step over `batch`, accumulated over cfg.grad_accum micro-batches.

    The batch loss is the mean of per-sample losses; tree noise is drawn per
    sample and step. Gradients are clipped to cfg.clip_norm before AdamW.
    """
    params = trainable(pipeline.model)
    for p in params.values():
        p.grad = None
    k = cfg.grad_accum
    if len(batch) % k:
        raise ConfigError(f"batch of {len(batch)} not divisible into {k} micro-batches")
    size = len(batch) // k
    total = 0.0
    for j in range(k):
        micro = batch[j * size:(j + 1) * size]
        seeds = [sample_seed(cfg.seed, step, j * size + i) for i in range(len(micro))]
        losses = pipeline.sample_losses(micro, deterministic=False, seeds=seeds,
                                        use_context=use_context)
        loss = losses.sum() / len(batch)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        loss.backward()
        total += float(loss.detach())
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm at step {step}")
    if cfg.clip_norm and norm > cfg.clip_norm:
        for g in grads.values():
            g.mul_(cfg.clip_norm / norm)
    lr = adamw_step(params, grads, state, cfg, step)
    return {"loss": total, "grad_norm": norm, "lr": lr}


def lm_window(ids: np.ndarray, length: int, running_len: int, rng: np.random.Generator) -> TrainSample:
    start = int(rng.integers(0, len(ids) - length + 1))
    w = ids[start: start + length].tolist()
    cut = length - running_len
    return TrainSample(w[:cut], w[cut:], Mode.LM)
