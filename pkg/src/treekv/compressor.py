"""Lower model: encode preserved tree nodes and keep downsampled per-layer K/V."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import Transformer, embed_tokens, mlp, self_attention
from .numerics import ConfigError, UsageError, track
from .tree import (CompressionSchedule, ContextTree, Policy, ReprCallbacks, SplitParams,
                   TreeNode, build_tree, check_schedule, downsample_indices)


@dataclass
class LayerKV:
    keys: torch.Tensor    # [M, l, d], unrotated
    values: torch.Tensor  # [M, l, d]

    @property
    def length(self) -> int:
        return self.keys.shape[1]


@dataclass
class CompressedKV:
    keys: torch.Tensor    # [M, l', d]
    values: torch.Tensor
    source_node: TreeNode

    @property
    def length(self) -> int:
        return self.keys.shape[1]


@dataclass
class ChunkState:
    chunk_index: int
    parts: list[CompressedKV]
    tree: ContextTree | None = None

    @property
    def total_len(self) -> int:
        return sum(p.length for p in self.parts)

    @property
    def keys(self) -> torch.Tensor:
        return torch.cat([p.keys for p in self.parts], dim=1)

    @property
    def values(self) -> torch.Tensor:
        return torch.cat([p.values for p in self.parts], dim=1)


def _as_ids(tokens, device=None) -> torch.Tensor:
    if torch.is_tensor(tokens):
        return tokens.to(dtype=torch.long)
    return torch.as_tensor(list(tokens), dtype=torch.long, device=device)


def _device(model: Transformer):
    return model.embed.device


def _check_ids(model: Transformer, ids: torch.Tensor) -> None:
    if ids.device.type == "meta" or ids.numel() == 0:
        return
    if int(ids.min()) < 0 or int(ids.max()) >= model.cfg.vocab_size:
        raise UsageError(f"token id out of range [0, {model.cfg.vocab_size})")


@torch.no_grad()
def encode_batch(model: Transformer, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run embedding plus the shared layers over [B, l] ids with node-local
    positions; returns keys and values of shape [B, M, l, d]."""
    cfg = model.cfg
    if ids.dim() != 2 or ids.shape[1] == 0:
        raise UsageError("encode needs a non-empty [B, l] batch")
    _check_ids(model, ids)
    x = embed_tokens(model, ids)
    pos = torch.arange(ids.shape[1], device=ids.device)
    ks, vs = [], []
    for blk in model.blocks[: cfg.shared_layers]:
        a, k, v = self_attention(blk, x, pos, cfg, tag="compressor")
        ks.append(k)
        vs.append(v)
        x = x + a
        x = x + mlp(blk, x, cfg)
    return torch.stack(ks, dim=1), torch.stack(vs, dim=1)


def encode_nodes(model: Transformer, token_lists: Sequence, exact_shapes: bool = False) -> list[LayerKV]:
    """Encode several nodes independently.

    Nodes are right-padded into one batch; causal masking keeps every real
    position blind to the padding. With `exact_shapes`, nodes are grouped by
    length instead so that no padded work is done.
    """
    ids = [_as_ids(t, _device(model)) for t in token_lists]
    if any(t.numel() == 0 for t in ids):
        raise UsageError("cannot encode an empty node")
    out: list[LayerKV | None] = [None] * len(ids)
    if exact_shapes:
        groups: dict[int, list[int]] = {}
        for i, t in enumerate(ids):
            groups.setdefault(t.numel(), []).append(i)
        batches = list(groups.values())
    else:
        batches = [list(range(len(ids)))] if ids else []
    for members in batches:
        width = max(ids[i].numel() for i in members)
        batch = torch.zeros(len(members), width, dtype=torch.long, device=ids[members[0]].device)
        for row, i in enumerate(members):
            batch[row, : ids[i].numel()] = ids[i]
        k, v = encode_batch(model, batch)
        for row, i in enumerate(members):
            l = ids[i].numel()
            out[i] = LayerKV(k[row, :, :l], v[row, :, :l])
    return out


def encode_node(tokens, model: Transformer) -> LayerKV:
    return encode_nodes(model, [tokens])[0]


def compress_node(kv: LayerKV, alpha: float, source_node: TreeNode | None = None) -> CompressedKV:
    """Gather the same equidistant rows of keys and values on every layer."""
    idx = torch.as_tensor(downsample_indices(kv.length, alpha), device=kv.keys.device)
    if source_node is None:
        source_node = TreeNode(0, kv.length, 1)
    keys = track(kv.keys.index_select(1, idx))
    values = track(kv.values.index_select(1, idx))
    return CompressedKV(keys, values, source_node)


def compress_chunk(chunk_tokens, chunk_index: int, tree: ContextTree, schedule: CompressionSchedule,
                   model: Transformer, exact_shapes: bool = False,
                   order: Sequence[int] | None = None) -> ChunkState:
    """Encode each preserved node on its own and concatenate the compressed
    parts in document order. `order` only permutes the encoding batch."""
    check_schedule(tree, schedule)
    ids = _as_ids(chunk_tokens, _device(model))
    if ids.numel() != tree.chunk_len:
        raise ConfigError(f"tree built for {tree.chunk_len} tokens, chunk has {ids.numel()}")
    nodes = list(tree.preserved)
    perm = list(order) if order is not None else list(range(len(nodes)))
    kvs = encode_nodes(model, [ids[nodes[i].start: nodes[i].end] for i in perm], exact_shapes)
    by_node = dict(zip(perm, kvs))
    parts = [compress_node(by_node[i], schedule.alpha(n.level), n)
             for i, n in sorted(enumerate(nodes), key=lambda p: p[1].start)]
    return ChunkState(chunk_index, parts, tree)


@torch.no_grad()
def first_layer_state(model: Transformer, tokens) -> torch.Tensor:
    """Hidden state at the last position after block 1 (attention + MLP)."""
    ids = _as_ids(tokens, _device(model))
    if ids.numel() == 0:
        raise UsageError("representation needs at least one token")
    _check_ids(model, ids)
    cfg = model.cfg
    blk = model.blocks[0]
    x = embed_tokens(model, ids.unsqueeze(0))
    pos = torch.arange(ids.numel(), device=ids.device)
    a, _, _ = self_attention(blk, x, pos, cfg, tag="repr")
    x = x + a
    x = x + mlp(blk, x, cfg)
    return x[0, -1]


def node_repr(tokens, model: Transformer) -> torch.Tensor:
    return first_layer_state(model, tokens)


def chunk_bounds(n_tokens: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, n_tokens)) for s in range(0, n_tokens, chunk_size)]


def chunk_rng(seed, chunk_index: int) -> np.random.Generator:
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng([*key, chunk_index])


def compress_context(context_tokens, model: Transformer, chunk_size: int,
                     schedule: CompressionSchedule, params: SplitParams = SplitParams(),
                     policy: Policy = Policy.ALWAYS_RIGHT, query_tokens=None,
                     deterministic: bool = True, seed: int = 0, parallel: bool = False,
                     exact_shapes: bool = False) -> list[ChunkState]:
    """Chunk the past context, grow one tree per chunk and compress it.

    Each chunk uses its own generator derived from (seed, chunk index), so the
    result does not depend on the order in which chunks are processed.
    """
    ids = _as_ids(context_tokens, _device(model))
    if ids.numel() == 0:
        return []
    if chunk_size < 2 * params.min_len:
        raise ConfigError(f"chunk_size {chunk_size} < 2 * min_len {params.min_len}")
    query_vec = None
    if policy is Policy.QUERY_AWARE:
        if query_tokens is None or len(query_tokens) == 0:
            raise UsageError("query-aware compression needs query tokens")
        query_vec = _query_vector(model, query_tokens)

    def one(item):
        i, (s, e) = item
        chunk = ids[s:e]
        fns = None
        if policy is Policy.QUERY_AWARE:
            fns = ReprCallbacks(node=lambda a, b: node_repr(chunk[a:b], model).cpu().numpy(),
                                query=lambda: query_vec)
        tree = build_tree(e - s, schedule.depth, params, policy, fns, deterministic,
                          chunk_rng(seed, i), chunk_index=i)
        return compress_chunk(chunk, i, tree, schedule, model, exact_shapes)

    work = list(enumerate(chunk_bounds(ids.numel(), chunk_size)))
    if parallel:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(one, work))
    return [one(w) for w in work]


def _query_vector(model: Transformer, query_tokens):
    # the decoder's first block is the compressor's first block
    return first_layer_state(model, query_tokens).cpu().numpy()
