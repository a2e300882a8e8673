"""Dense-array primitives on top of torch, with operation counting.

Every primitive accepts leading batch dimensions. Gradients come from torch
autograd; `grad_check` is the independent finite-difference oracle.

When a `counting()` context is active, `matmul` and `attention` tally
multiply-accumulates and every tensor they produce is tracked until it is
garbage collected, giving a high-water mark of live array bytes.
"""

from __future__ import annotations

import math
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float64


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class AttentionCall:
    tag: str
    batch: int
    t_q: int
    t_k: int
    head_dim: int

    @property
    def score_macs(self) -> int:
        return self.batch * self.t_q * self.t_k * self.head_dim

    @property
    def mix_macs(self) -> int:
        return self.batch * self.t_q * self.t_k * self.head_dim


@dataclass
class OpCounter:
    attention_calls: list[AttentionCall] = field(default_factory=list)
    matmul_macs: int = 0
    live_bytes: int = 0
    peak_bytes: int = 0

    def attention_macs(self, tag: str | None = None) -> int:
        return sum(c.score_macs + c.mix_macs for c in self.attention_calls
                   if tag is None or c.tag == tag)

    def score_macs(self, tag: str | None = None) -> int:
        return sum(c.score_macs for c in self.attention_calls
                   if tag is None or c.tag == tag)

    def track(self, t: torch.Tensor) -> torch.Tensor:
        n = t.numel() * t.element_size()
        self.live_bytes += n
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(t, self._release, n)
        return t

    def _release(self, n: int) -> None:
        self.live_bytes -= n


_counters: list[OpCounter] = []


@contextmanager
def counting():
    """Collect MAC tallies and peak live bytes for ops run inside the block."""
    c = OpCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _track(t: torch.Tensor) -> torch.Tensor:
    for c in _counters:
        c.track(t)
    return t


def track(t: torch.Tensor) -> torch.Tensor:
    """Register a tensor created outside the primitives (e.g. a KV cache)."""
    return _track(t)


def _batch_size(shape: Sequence[int]) -> int:
    return math.prod(shape) if shape else 1


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    out = a @ b
    if _counters:
        macs = _batch_size(out.shape[:-2]) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in _counters:
            c.matmul_macs += macs
        _track(out)
    return out


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis (torch subtracts the row max internally)."""
    return torch.softmax(x, dim=-1)


def rope_cos_sin(positions: torch.Tensor, dim: int, base: float,
                 dtype=DTYPE, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    if dim % 2:
        raise ConfigError(f"rotary dimension must be even, got {dim}")
    inv_freq = base ** (-torch.arange(0, dim, 2, dtype=dtype, device=device) / dim)
    angles = positions.to(dtype=dtype, device=device).unsqueeze(-1) * inv_freq
    return torch.cos(angles), torch.sin(angles)


def rope_apply(x: torch.Tensor, positions, theta_base: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved pairs (x[2i], x[2i+1]) counterclockwise by p * base^(-2i/d).

    `positions` broadcasts against the sequence axis of `x` (shape [..., t]).
    """
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary dimension must be even, got {d}")
    if not torch.is_tensor(positions):
        positions = torch.as_tensor(positions, dtype=torch.long)
    cos, sin = rope_cos_sin(positions, d, theta_base, dtype=x.dtype, device=x.device)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.flatten(-2)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if eps <= 0:
        raise ConfigError("rms_norm eps must be positive")
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = False,
              key_mask: torch.Tensor | None = None, tag: str = "attn") -> torch.Tensor:
    """softmax(q k^T / sqrt(d_h)) v over the last two axes.

    key_mask: boolean [..., t_k], True for real keys. A query row with no real
    key yields zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    t_q, t_k, d_h = q.shape[-2], k.shape[-2], q.shape[-1]
    if causal and t_q != t_k:
        raise UsageError(f"causal attention needs t_q == t_k, got {t_q} and {t_k}")
    if not _counters and t_k and q.device.type != "meta":
        out = _fused_attention(q, k, v, causal, key_mask)
        if out is not None:
            return out
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_h)
    if causal:
        future = torch.ones(t_q, t_k, dtype=torch.bool, device=q.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
    if key_mask is not None:
        km = key_mask.unsqueeze(-2)
        while km.dim() < scores.dim():
            km = km.unsqueeze(-3)
        scores = scores.masked_fill(~km, float("-inf"))
    probs = softmax_rows(scores)
    if key_mask is not None:
        probs = torch.nan_to_num(probs, nan=0.0)
    out = probs @ v
    if _counters:
        batch = _batch_size(torch.broadcast_shapes(q.shape[:-2], k.shape[:-2]))
        for c in _counters:
            c.attention_calls.append(AttentionCall(tag, batch, t_q, t_k, d_h))
        _track(scores)
        _track(probs)
        _track(out)
    return out


def _fused_attention(q, k, v, causal, key_mask):
    """Same result through torch's fused kernel (no score matrix kept for
    backward). Returns None when some query row has no visible key, which the
    explicit path turns into a zero row."""
    mask = None
    if key_mask is not None:
        mask = key_mask.unsqueeze(-2)
        while mask.dim() < q.dim():
            mask = mask.unsqueeze(-3)
        if causal:
            t_q, t_k = q.shape[-2], k.shape[-2]
            mask = mask & torch.ones(t_q, t_k, dtype=torch.bool, device=q.device).tril()
        if not bool(mask.any(-1).all()):
            return None
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask, is_causal=causal and mask is None)


def init_normal(shape: Sequence[int], generator: torch.Generator, std: float = 0.02) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE) * std


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if x.device.type != "meta" and not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {what}")
    return x


def grad_check(f: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
               h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    `f` is re-evaluated with each parameter entry perturbed in place; params
    without `requires_grad` are skipped, so they are implicitly checked to
    receive no gradient through `f`.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    out.backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = torch.zeros_like(p) if p.grad is None else p.grad.clone()
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = analytic.view(-1)[i].item()
                rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                worst = max(worst, rel)
    return worst
