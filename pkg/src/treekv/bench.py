"""Attention cost accounting: instrumented MAC counts, their closed forms, and
the sweeps over shared depth M, tree depth h and compression ratio beta.

Counts come from running the real code path with shape-only ("meta") tensors
inside `numerics.counting()`, so long inputs cost no memory. Score and
value-mixing products are both counted: one attention call over t_q queries
and t_k keys of head width d_h costs 2 * t_q * t_k * d_h MACs per head.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .compressor import chunk_bounds, compress_context
from .decoder import forward, generate
from .model import ModelConfig, Transformer
from .numerics import ConfigError, counting
from .tree import CompressionSchedule, Policy, SplitParams, build_tree, compressed_len, schedule_for


class Scheme(enum.Enum):
    FULL = "full"
    HIERARCHICAL = "hierarchical"


@dataclass
class MacCount:
    """Instrumented tallies of one prefill, split by attention role."""
    compressor: int = 0
    cross: int = 0
    self_attn: int = 0
    repr: int = 0
    matmul: int = 0
    peak_bytes: int = 0
    compressed_len: int = 0

    @property
    def attention(self) -> int:
        return self.compressor + self.cross + self.self_attn + self.repr


def _meta_model(cfg: ModelConfig) -> Transformer:
    with torch.device("meta"):
        return Transformer(cfg)


def _split(min_len: int) -> SplitParams:
    return SplitParams(min_len=min_len)


def count_attention_macs(cfg: ModelConfig, T: int, t_d: int, scheme: Scheme | str,
                         chunk_size: int = 1024, schedule: CompressionSchedule | None = None,
                         min_len: int = 16, model: Transformer | None = None) -> MacCount:
    """Run one prefill of T context plus t_d running tokens and tally MACs.

    FULL feeds all T + t_d tokens through the plain N-layer decoder.
    HIERARCHICAL compresses the T context tokens chunk by chunk with
    deterministic AlwaysRight trees (each preserved node its own forward, no
    padding) and runs the t_d running tokens through the decoder.
    """
    scheme = Scheme(scheme)
    model = model or _meta_model(cfg)
    dev = model.embed.device
    c = MacCount()
    with counting() as ctr:
        if scheme is Scheme.FULL:
            if T + t_d < 1:
                raise ConfigError("nothing to run")
            forward(torch.zeros(T + t_d, dtype=torch.long, device=dev), None, model)
        else:
            if schedule is None:
                raise ConfigError("the hierarchical scheme needs a compression schedule")
            states = compress_context(torch.zeros(T, dtype=torch.long, device=dev), model, chunk_size,
                                      schedule, _split(min_len), Policy.ALWAYS_RIGHT,
                                      deterministic=True, exact_shapes=True)
            c.compressed_len = sum(s.total_len for s in states)
            if t_d:
                forward(torch.zeros(t_d, dtype=torch.long, device=dev), states, model)
        c.compressor = ctr.attention_macs("compressor")
        c.cross = ctr.attention_macs("cross")
        c.self_attn = ctr.attention_macs("self")
        c.repr = ctr.attention_macs("repr")
        c.matmul = ctr.matmul_macs
        c.peak_bytes = ctr.peak_bytes
    return c


def modeled_macs(cfg: ModelConfig, T: int, t_d: int, scheme: Scheme | str, chunk_size: int = 1024,
                 schedule: CompressionSchedule | None = None, min_len: int = 16) -> MacCount:
    """Closed-form counterpart of `count_attention_macs`.

    FULL:          2 d N (T + t_d)^2
    HIERARCHICAL:  2 d M sum_nodes l^2  +  2 d M t_d |S'|  +  2 d N t_d^2
    """
    scheme = Scheme(scheme)
    d, M, N = cfg.d_model, cfg.shared_layers, cfg.n_layers
    if scheme is Scheme.FULL:
        return MacCount(self_attn=2 * d * N * (T + t_d) ** 2)
    if schedule is None:
        raise ConfigError("the hierarchical scheme needs a compression schedule")
    node_sq, s_prime = 0, 0
    for s, e in chunk_bounds(T, chunk_size):
        tree = build_tree(e - s, schedule.depth, _split(min_len), Policy.ALWAYS_RIGHT, deterministic=True)
        for n in tree.preserved:
            node_sq += n.length ** 2
            s_prime += compressed_len(n.length, schedule.alpha(n.level))
    return MacCount(compressor=2 * d * M * node_sq,
                    cross=2 * d * M * t_d * s_prime if t_d else 0,
                    self_attn=2 * d * N * t_d ** 2,
                    compressed_len=s_prime)


def formula_score_ops(T: int, n: int, t_d: int, s_prime: int) -> int:
    """Dominant hierarchical terms n (T/n)^2 + t_d |S'| (per layer, per unit width)."""
    return n * (T // n) ** 2 + t_d * s_prime


def full_score_ops(T: int, t_d: int) -> int:
    return (T + t_d) ** 2


# -- sweeps -----------------------------------------------------------------------

METRICS_FIELDS = ["task", "scheme", "length", "t_d", "shared_layers", "depth", "alpha_leaf", "beta",
                  "metric", "value", "attention_macs", "compressor_macs", "cross_macs", "self_macs",
                  "matmul_macs", "peak_bytes", "prefill_ms", "decode_ms", "seed"]


@dataclass
class MetricsRow:
    task: str
    length: int
    value: float = float("nan")
    metric: str = ""
    scheme: str = ""
    t_d: int = 0
    shared_layers: int = 0
    depth: int = 0
    alpha_leaf: int = 0
    beta: float = float("nan")
    attention_macs: int = 0
    compressor_macs: int = 0
    cross_macs: int = 0
    self_macs: int = 0
    matmul_macs: int = 0
    peak_bytes: int = 0
    prefill_ms: float = float("nan")
    decode_ms: float = float("nan")
    seed: int = 0

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: d[k] for k in METRICS_FIELDS}


def write_metrics(path, rows: Iterable[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def schedule_for_beta(depth: int, beta: float, chunk_len: int) -> CompressionSchedule:
    """A halving schedule with whole-tree ratio `beta` on `chunk_len` tokens;
    beta = 1 is the uncompressed schedule (every alpha = 1)."""
    if beta == 1:
        return CompressionSchedule((1,) * depth)
    a = 1
    while a <= chunk_len:
        sched = schedule_for(depth, a)
        if sched.beta(chunk_len) == beta:
            return sched
        a *= 2
    raise ConfigError(f"no halving schedule of depth {depth} reaches beta={beta} on {chunk_len} tokens")


@dataclass
class BenchPoint:
    shared_layers: int
    depth: int
    schedule: CompressionSchedule


def sweep_points(base_m: int, base_depth: int, base_alpha: int, n_layers: int, chunk_len: int,
                 ms: Sequence[int] = (1, 2, 4), depths: Sequence[int] = (1, 2, 3, 4),
                 betas: Sequence[float] = (1, 2, 4, 8)) -> list[tuple[str, BenchPoint]]:
    """One-at-a-time sweeps around the base point, as (sweep name, point).
    Unreachable betas for the base depth are skipped."""
    base = schedule_for(base_depth, base_alpha)
    pts = [("M", BenchPoint(m, base_depth, base)) for m in ms if m <= n_layers]
    for b in betas:
        try:
            pts.append(("beta", BenchPoint(base_m, base_depth, schedule_for_beta(base_depth, b, chunk_len))))
        except ConfigError:
            continue
    pts += [("h", BenchPoint(base_m, h, schedule_for(h, base_alpha))) for h in depths]
    return pts


def _timed_prefill(model: Transformer, T: int, t_d: int, chunk_size: int, schedule, min_len: int,
                   decode_tokens: int, seed: int) -> tuple[float, float]:
    g = torch.Generator().manual_seed(seed)
    ctx = torch.randint(0, model.cfg.vocab_size, (T,), generator=g)
    run = torch.randint(0, model.cfg.vocab_size, (t_d,), generator=g)
    with torch.no_grad():
        t0 = time.perf_counter()
        states = compress_context(ctx, model, chunk_size, schedule, _split(min_len), Policy.ALWAYS_RIGHT,
                                  deterministic=True)
        t1 = time.perf_counter()
        forward(run, states, model)
        t2 = time.perf_counter()
        decode = float("nan")
        if decode_tokens:
            generate(run, decode_tokens, model, states)
            # generate re-runs the running-text prefill once; take that share out
            decode = max(0.0, (time.perf_counter() - t2) - (t2 - t1))
    return 1e3 * (t2 - t0), 1e3 * decode


def bench_rows(cfg: ModelConfig, lengths: Sequence[int], t_d: int, chunk_size: int,
               base_depth: int, base_alpha: int, min_len: int = 16, seed: int = 0,
               weights: Transformer | None = None, time_budget_bytes: int = 1 << 30,
               decode_tokens: int = 0) -> list[MetricsRow]:
    """MAC/memory rows for every sweep point and length, plus the full-attention
    baseline. Wall-clock is measured on real tensors only when the counted
    peak fits `time_budget_bytes`."""
    rows = []
    for T in lengths:
        full = count_attention_macs(cfg, T, t_d, Scheme.FULL)
        rows.append(MetricsRow("bench", T, scheme="full", t_d=t_d, shared_layers=cfg.shared_layers,
                               attention_macs=full.attention, self_macs=full.self_attn,
                               matmul_macs=full.matmul, peak_bytes=full.peak_bytes, seed=seed))
        for name, p in sweep_points(cfg.shared_layers, base_depth, base_alpha, cfg.n_layers, chunk_size):
            pcfg = dataclasses.replace(cfg, shared_layers=p.shared_layers)
            sched = p.schedule
            c = count_attention_macs(pcfg, T, t_d, Scheme.HIERARCHICAL, chunk_size, sched, min_len)
            row = MetricsRow(f"bench_{name}", T, scheme="hierarchical", t_d=t_d,
                             shared_layers=p.shared_layers, depth=p.depth, alpha_leaf=sched.alphas[-1],
                             beta=sched.beta(chunk_size), metric="attention_ratio_vs_full",
                             value=full.attention / c.attention, attention_macs=c.attention,
                             compressor_macs=c.compressor, cross_macs=c.cross, self_macs=c.self_attn,
                             matmul_macs=c.matmul, peak_bytes=c.peak_bytes, seed=seed)
            if c.peak_bytes <= time_budget_bytes:
                model = Transformer(pcfg, seed=seed)
                if weights is not None and weights.cfg == pcfg:
                    model.load_state_dict(weights.state_dict())
                row.prefill_ms, row.decode_ms = _timed_prefill(model, T, t_d, chunk_size, sched,
                                                               min_len, decode_tokens, seed)
            rows.append(row)
    return rows
