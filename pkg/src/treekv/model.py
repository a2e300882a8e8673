"""Model configuration, parameters and the transformer sublayers.

One parameter set serves both roles: the first `shared_layers` blocks encode
context nodes (compressor) and also run inside the decoder, where they carry
an extra cross-attention sublayer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, ConfigError, attention, init_normal, matmul, rms_norm, rope_apply


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    shared_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    rope_base: float = 10000.0
    max_train_len: int = 512
    mlp_ratio: int = 4
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if not 1 <= self.shared_layers <= self.n_layers:
            raise ConfigError(f"need 1 <= shared_layers <= n_layers, got "
                              f"{self.shared_layers}, {self.n_layers}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, cross: bool):
        super().__init__()
        d, h = cfg.d_model, cfg.mlp_ratio * cfg.d_model
        std = cfg.init_std
        self.attn_norm = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.wq = nn.Parameter(init_normal((d, d), gen, std))
        self.wk = nn.Parameter(init_normal((d, d), gen, std))
        self.wv = nn.Parameter(init_normal((d, d), gen, std))
        self.wo = nn.Parameter(init_normal((d, d), gen, std))
        self.mlp_norm = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.w_up = nn.Parameter(init_normal((d, h), gen, std))
        self.w_down = nn.Parameter(init_normal((h, d), gen, std))
        self.has_cross = cross
        if cross:
            self.cross_norm = nn.Parameter(torch.ones(d, dtype=DTYPE))
            self.cross_wq = nn.Parameter(self.wq.detach().clone())
            self.cross_wo = nn.Parameter(torch.zeros(d, d, dtype=DTYPE))

    def self_params(self) -> list[nn.Parameter]:
        return [self.attn_norm, self.wq, self.wk, self.wv, self.wo,
                self.mlp_norm, self.w_up, self.w_down]

    def cross_params(self) -> list[nn.Parameter]:
        return [self.cross_norm, self.cross_wq, self.cross_wo] if self.has_cross else []


class Transformer(nn.Module):
    """All trainable arrays of the compressor/decoder pair."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.embed = nn.Parameter(init_normal((cfg.vocab_size, cfg.d_model), gen, cfg.init_std))
        self.blocks = nn.ModuleList(
            [Block(cfg, gen, cross=i < cfg.shared_layers) for i in range(cfg.n_layers)])
        self.final_norm = nn.Parameter(torch.ones(cfg.d_model, dtype=DTYPE))
        self.lm_head = nn.Parameter(init_normal((cfg.d_model, cfg.vocab_size), gen, cfg.init_std))

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters()
                   if p.requires_grad or not trainable_only)

    @torch.no_grad()
    def reset_cross(self) -> None:
        """Re-derive the cross-attention sublayers from the current weights:
        query projection copied from the layer's self-attention query, unit
        pre-norm gain, zero output projection (the decoder is then exactly the
        plain model again). Call after the backbone has been trained."""
        for blk in self.blocks[: self.cfg.shared_layers]:
            blk.cross_wq.copy_(blk.wq)
            blk.cross_norm.fill_(1.0)
            blk.cross_wo.zero_()

    def set_freezing(self, policy: str) -> None:
        """'none': everything trains. 'shared': embeddings and the shared layers'
        own weights are frozen; cross-attention, upper layers and head train."""
        if policy not in ("none", "shared"):
            raise ConfigError(f"unknown freezing policy {policy!r}")
        for p in self.parameters():
            p.requires_grad_(True)
        if policy == "shared":
            self.embed.requires_grad_(False)
            for blk in self.blocks[: self.cfg.shared_layers]:
                for p in blk.self_params():
                    p.requires_grad_(False)


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).transpose(-2, -3)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, t, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, t, h * dh)


def embed_tokens(model: Transformer, ids: torch.Tensor) -> torch.Tensor:
    return F.embedding(ids, model.embed)


def qkv(blk: Block, x: torch.Tensor, cfg: ModelConfig):
    """Pre-norm Q/K/V projections, heads folded into the feature axis, no rotation."""
    h = rms_norm(x, blk.attn_norm, cfg.norm_eps)
    return matmul(h, blk.wq), matmul(h, blk.wk), matmul(h, blk.wv)


def self_attention(blk: Block, x: torch.Tensor, positions: torch.Tensor, cfg: ModelConfig,
                   tag: str = "self", cache: dict | None = None):
    """Causal self-attention sublayer output (without the residual) and the
    layer's unrotated keys and values.

    With `cache` (keys 'k', 'v' holding rotated keys/values of earlier steps),
    the new positions attend to the cache plus themselves.
    """
    q, k, v = qkv(blk, x, cfg)
    qh = rope_apply(split_heads(q, cfg.n_heads), positions, cfg.rope_base)
    kh = rope_apply(split_heads(k, cfg.n_heads), positions, cfg.rope_base)
    vh = split_heads(v, cfg.n_heads)
    if cache is None:
        o = attention(qh, kh, vh, causal=True, tag=tag)
    else:
        if cache.get("k") is not None:
            kh = torch.cat([cache["k"], kh], dim=-2)
            vh = torch.cat([cache["v"], vh], dim=-2)
        cache["k"], cache["v"] = kh, vh
        t_new, t_all = qh.shape[-2], kh.shape[-2]
        if t_new == 1:
            o = attention(qh, kh, vh, causal=False, tag=tag)
        elif t_new == t_all:
            o = attention(qh, kh, vh, causal=True, tag=tag)
        else:
            raise ConfigError("multi-token extension of a non-empty cache is not supported")
    return matmul(merge_heads(o), blk.wo), k, v


def mlp(blk: Block, x: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    h = rms_norm(x, blk.mlp_norm, cfg.norm_eps)
    return matmul(F.silu(matmul(h, blk.w_up)), blk.w_down)


def output_logits(model: Transformer, x: torch.Tensor) -> torch.Tensor:
    return matmul(rms_norm(x, model.final_norm, model.cfg.norm_eps), model.lm_head)
