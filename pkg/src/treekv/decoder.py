"""Upper model: causal decoder whose shared layers cross-attend to the
compressed chunk states, with one rotary index per chunk."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .compressor import ChunkState, _as_ids, _check_ids, first_layer_state
from .model import (Block, Transformer, embed_tokens, merge_heads, mlp, output_logits,
                    self_attention, split_heads)
from .numerics import UsageError, attention, check_finite, matmul, rms_norm, rope_apply


@dataclass
class PositionIndexPlan:
    p_q: list[int]
    p_k: list[int]


def position_plan(chunk_states: Sequence[ChunkState], query_len: int) -> PositionIndexPlan:
    """Queries sit one chunk after the last context chunk; every compressed
    token of chunk i carries index i."""
    n = len(chunk_states)
    p_k = [i for i, st in enumerate(chunk_states) for _ in range(st.total_len)]
    return PositionIndexPlan([n] * query_len, p_k)


@dataclass
class CrossContext:
    """Chunk states of a batch, concatenated and right-padded per sample."""
    keys: torch.Tensor        # [M, B, S, d]
    values: torch.Tensor      # [M, B, S, d]
    key_pos: torch.Tensor     # [B, S]
    key_mask: torch.Tensor    # [B, S]
    query_pos: torch.Tensor   # [B]

    @classmethod
    def pack(cls, batch_states: Sequence[Sequence[ChunkState]], n_layers: int,
             d_model: int, device=None, dtype=torch.float64) -> "CrossContext":
        B = len(batch_states)
        plans = [position_plan(s, 1) for s in batch_states]
        S = max((len(p.p_k) for p in plans), default=0)
        keys = torch.zeros(n_layers, B, S, d_model, dtype=dtype, device=device)
        values = torch.zeros_like(keys)
        key_pos = torch.zeros(B, S, dtype=torch.long, device=device)
        key_mask = torch.zeros(B, S, dtype=torch.bool, device=device)
        for b, (states, plan) in enumerate(zip(batch_states, plans)):
            s = len(plan.p_k)
            if s:
                keys[:, b, :s] = torch.cat([st.keys for st in states], dim=1)
                values[:, b, :s] = torch.cat([st.values for st in states], dim=1)
                key_pos[b, :s] = torch.as_tensor(plan.p_k)
                key_mask[b, :s] = True
        query_pos = torch.as_tensor([len(s) for s in batch_states], dtype=torch.long, device=device)
        return cls(keys, values, key_pos, key_mask, query_pos)

    @classmethod
    def single(cls, states: Sequence[ChunkState]) -> "CrossContext":
        """Unpadded context of one sample (exact shapes for counting)."""
        plan = position_plan(states, 1)
        keys = torch.cat([st.keys for st in states], dim=1).unsqueeze(1)
        values = torch.cat([st.values for st in states], dim=1).unsqueeze(1)
        dev = keys.device
        return cls(keys, values,
                   torch.as_tensor(plan.p_k, device=dev).unsqueeze(0),
                   torch.ones(1, len(plan.p_k), dtype=torch.bool, device=dev),
                   torch.as_tensor([len(states)], device=dev))

    @property
    def empty(self) -> bool:
        return self.keys.shape[2] == 0

    def is_dense(self) -> bool:
        return self.keys.device.type == "meta" or bool(self.key_mask.all())


def cross_attention_layer(hidden: torch.Tensor, blk: Block, keys: torch.Tensor, values: torch.Tensor,
                          key_pos: torch.Tensor, query_pos: torch.Tensor, cfg,
                          key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """hidden [B, t, d] + W_o . attn(rope(Q, n), rope(K', p_k), V'), non-causal.

    keys/values are this layer's compressed states [B, S, d]; query_pos [B]
    is the chunk count of each sample.
    """
    if keys.shape[-2] == 0:
        return hidden
    h = rms_norm(hidden, blk.cross_norm, cfg.norm_eps)
    q = split_heads(matmul(h, blk.cross_wq), cfg.n_heads)            # [B, H, t, dh]
    t = hidden.shape[-2]
    qpos = query_pos.view(-1, 1, 1).expand(-1, 1, t)                  # [B, 1, t]
    q = rope_apply(q, qpos, cfg.rope_base)
    k = rope_apply(split_heads(keys, cfg.n_heads), key_pos.unsqueeze(1), cfg.rope_base)
    v = split_heads(values, cfg.n_heads)
    o = attention(q, k, v, causal=False, key_mask=key_mask, tag="cross")
    return hidden + matmul(merge_heads(o), blk.cross_wo)


def _to_context(chunk_states, model: Transformer) -> CrossContext | None:
    if chunk_states is None:
        return None
    if isinstance(chunk_states, CrossContext):
        return None if chunk_states.empty else chunk_states
    if len(chunk_states) == 0:
        return None
    return CrossContext.single(chunk_states)


def run_layers(model: Transformer, x: torch.Tensor, positions: torch.Tensor,
               ctx: CrossContext | None, caches: list[dict] | None = None,
               n_blocks: int | None = None) -> torch.Tensor:
    cfg = model.cfg
    blocks = model.blocks if n_blocks is None else model.blocks[:n_blocks]
    dense = ctx is not None and ctx.is_dense()
    for i, blk in enumerate(blocks):
        a, _, _ = self_attention(blk, x, positions, cfg, tag="self",
                                 cache=caches[i] if caches is not None else None)
        x = x + a
        if ctx is not None and i < cfg.shared_layers:
            x = cross_attention_layer(x, blk, ctx.keys[i], ctx.values[i], ctx.key_pos,
                                      ctx.query_pos, cfg, None if dense else ctx.key_mask)
        x = x + mlp(blk, x, cfg)
    return x


def forward(x_d, chunk_states, model: Transformer) -> torch.Tensor:
    """Logits [t, vocab] for ids [t] (or [B, t, vocab] for ids [B, t]).

    chunk_states: list of ChunkState for one sample, a packed CrossContext, or
    None / [] for the plain decoder.
    """
    ids = _as_ids(x_d, model.embed.device)
    squeeze = ids.dim() == 1
    if squeeze:
        ids = ids.unsqueeze(0)
    if ids.shape[-1] < 1:
        raise UsageError("forward needs at least one running-text token")
    _check_ids(model, ids)
    ctx = _to_context(chunk_states, model)
    x = embed_tokens(model, ids)
    pos = torch.arange(ids.shape[-1], device=ids.device)
    logits = check_finite(output_logits(model, run_layers(model, x, pos, ctx)), "logits")
    return logits[0] if squeeze else logits


def query_repr(x_d, model: Transformer) -> torch.Tensor:
    """Last-position state after decoder block 1 (no context exists yet)."""
    return first_layer_state(model, x_d)


@torch.no_grad()
def generate(prompt, max_new: int, model: Transformer, chunk_states=None,
             stop_tokens: Sequence[int] = ()) -> list[int]:
    """Greedy decoding with a self-attention cache; the cross context is fixed."""
    if max_new < 1:
        raise UsageError("max_new must be >= 1")
    ids = _as_ids(prompt, model.embed.device).unsqueeze(0)
    _check_ids(model, ids)
    ctx = _to_context(chunk_states, model)
    caches = [{} for _ in model.blocks]
    x = run_layers(model, embed_tokens(model, ids),
                   torch.arange(ids.shape[-1], device=ids.device), ctx, caches)
    out: list[int] = []
    pos = ids.shape[-1]
    for step in range(max_new):
        nxt = int(output_logits(model, x[:, -1:])[0, -1].argmax())
        out.append(nxt)
        if nxt in stop_tokens or step == max_new - 1:
            break
        x = run_layers(model, embed_tokens(model, torch.tensor([[nxt]], device=ids.device)),
                       torch.tensor([pos], device=ids.device), ctx, caches)
        pos += 1
    return out
