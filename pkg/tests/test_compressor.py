import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY
from oracle import forward_np
from treekv.compressor import (ChunkState, LayerKV, chunk_bounds, compress_chunk, compress_context,
                               compress_node, encode_node, encode_nodes, node_repr)
from treekv.model import ModelConfig, Transformer
from treekv.numerics import ConfigError, UsageError
from treekv.tree import (CompressionSchedule, Policy, SplitParams, build_tree, downsample_indices,
                         schedule_for, tree_compressed_length)

rng = np.random.default_rng(0)


def tokens(n, seed=0, vocab=TINY.vocab_size):
    return np.random.default_rng(seed).integers(0, vocab, n).tolist()


def test_encode_node_shapes(tiny_model):
    kv = encode_node(tokens(9), tiny_model)
    assert kv.keys.shape == kv.values.shape == (2, 9, 16)
    one = encode_node([3], tiny_model)
    assert one.keys.shape == (2, 1, 16)


def test_encode_node_matches_reference(tiny_model):
    ids = tokens(7, seed=3)
    kv = encode_node(ids, tiny_model)
    cap = []
    forward_np(tiny_model, ids, n_blocks=2, capture=cap)
    for layer, (k, v) in enumerate(cap):
        np.testing.assert_allclose(kv.keys[layer].numpy(), k, atol=1e-12)
        np.testing.assert_allclose(kv.values[layer].numpy(), v, atol=1e-12)


def test_encode_node_deterministic_and_empty(tiny_model):
    a, b = encode_node(tokens(11), tiny_model), encode_node(tokens(11), tiny_model)
    assert torch.equal(a.keys, b.keys) and torch.equal(a.values, b.values)
    with pytest.raises(UsageError):
        encode_node([], tiny_model)
    with pytest.raises(UsageError):
        encode_node([TINY.vocab_size], tiny_model)


def test_padded_batch_equals_separate_forwards(tiny_model):
    lists = [tokens(n, seed=n) for n in (5, 12, 1, 8)]
    padded = encode_nodes(tiny_model, lists)
    exact = encode_nodes(tiny_model, lists, exact_shapes=True)
    for p, e, ids in zip(padded, exact, lists):
        single = encode_node(ids, tiny_model)
        assert torch.allclose(p.keys, single.keys, atol=1e-13)
        assert torch.equal(e.keys, single.keys) and torch.equal(e.values, single.values)


def test_compress_node_examples():
    g = torch.Generator().manual_seed(0)
    kv = LayerKV(torch.randn(2, 8, 4, generator=g, dtype=torch.float64),
                 torch.randn(2, 8, 4, generator=g, dtype=torch.float64))
    same = compress_node(kv, 1)
    assert torch.equal(same.keys, kv.keys) and torch.equal(same.values, kv.values)
    c = compress_node(kv, 4)
    assert torch.equal(c.keys, kv.keys[:, [2, 6]]) and torch.equal(c.values, kv.values[:, [2, 6]])


def test_compress_chunk_budget_examples():
    cfg = ModelConfig(n_layers=2, shared_layers=1, d_model=8, n_heads=2, vocab_size=16, max_train_len=1024)
    model = Transformer(cfg, seed=0)
    ids = tokens(1024, vocab=16)
    tree = build_tree(1024, 3, deterministic=True)
    state = compress_chunk(ids, 0, tree, CompressionSchedule((16, 8, 4)), model)
    assert state.total_len == 128 and state.keys.shape == (1, 128, 8)
    tree1 = build_tree(1024, 1, deterministic=True)
    assert compress_chunk(ids, 0, tree1, CompressionSchedule((1,)), model).total_len == 1024
    with pytest.raises(ConfigError):
        compress_chunk(ids, 0, tree, CompressionSchedule((8, 4)), model)


def test_compress_chunk_rows_come_from_independent_nodes(tiny_model):
    ids = tokens(64, seed=5)
    tree = build_tree(64, 2, SplitParams(min_len=4), deterministic=True)
    sched = CompressionSchedule((4, 2))
    state = compress_chunk(ids, 0, tree, sched, tiny_model)
    for part, node in zip(state.parts, tree.preserved):
        kv = encode_node(ids[node.start:node.end], tiny_model)
        idx = downsample_indices(node.length, sched.alpha(node.level))
        assert torch.allclose(part.keys, kv.keys[:, idx], atol=1e-13)
        assert part.source_node == node
    assert state.total_len == tree_compressed_length(tree, sched)


def test_compress_chunk_encoding_order_irrelevant(tiny_model):
    ids = tokens(64, seed=6)
    tree = build_tree(64, 3, SplitParams(min_len=4), deterministic=True)
    sched = schedule_for(3, 1)
    a = compress_chunk(ids, 0, tree, sched, tiny_model, exact_shapes=True)
    b = compress_chunk(ids, 0, tree, sched, tiny_model, exact_shapes=True, order=[3, 1, 0, 2])
    assert torch.equal(a.keys, b.keys) and torch.equal(a.values, b.values)


def test_same_node_in_different_chunks_is_identical(tiny_model):
    shared = tokens(16, seed=9)
    c1 = tokens(16, seed=1) + shared
    c2 = tokens(16, seed=2) + shared
    tree = build_tree(32, 1, SplitParams(min_len=4), deterministic=True)
    sched = CompressionSchedule((2,))
    a = compress_chunk(c1, 0, tree, sched, tiny_model, exact_shapes=True)
    b = compress_chunk(c2, 0, tree, sched, tiny_model, exact_shapes=True)
    assert torch.equal(a.parts[1].keys, b.parts[1].keys)
    assert not torch.equal(a.parts[0].keys, b.parts[0].keys)


def test_chunking_examples():
    assert chunk_bounds(3072, 1024) == [(0, 1024), (1024, 2048), (2048, 3072)]
    assert chunk_bounds(2500, 1024) == [(0, 1024), (1024, 2048), (2048, 2500)]


def test_compress_context_chunks_and_short_tail(tiny_model):
    params = SplitParams(min_len=4)
    states = compress_context(tokens(150, seed=4), tiny_model, 64, schedule_for(3, 1), params)
    assert [s.chunk_index for s in states] == [0, 1, 2]
    assert [s.tree.chunk_len for s in states] == [64, 64, 22]
    assert states[2].tree.early_stop
    assert compress_context([], tiny_model, 64, schedule_for(3, 1), params) == []
    with pytest.raises(ConfigError):
        compress_context(tokens(10), tiny_model, 6, schedule_for(3, 1), params)


def test_full_chunks_share_budget(tiny_model):
    sched = schedule_for(2, 2)
    states = compress_context(tokens(256, seed=8), tiny_model, 64, sched, SplitParams(min_len=4))
    assert {s.total_len for s in states} == {tree_compressed_length(states[0].tree, sched)}


@pytest.mark.parametrize("policy", [Policy.ALWAYS_RIGHT, Policy.RANDOM, Policy.QUERY_AWARE])
def test_parallel_equals_sequential(tiny_model, policy):
    kw = dict(params=SplitParams(min_len=4, gamma=5), policy=policy, query_tokens=tokens(5, 11),
              deterministic=False, seed=(3, 4))
    seq = compress_context(tokens(300, seed=7), tiny_model, 64, schedule_for(2, 2), **kw)
    par = compress_context(tokens(300, seed=7), tiny_model, 64, schedule_for(2, 2), parallel=True, **kw)
    assert [s.tree.preserved for s in seq] == [s.tree.preserved for s in par]
    for a, b in zip(seq, par):
        assert torch.equal(a.keys, b.keys) and torch.equal(a.values, b.values)


def test_query_aware_needs_query(tiny_model):
    with pytest.raises(UsageError):
        compress_context(tokens(64), tiny_model, 64, schedule_for(2, 2), SplitParams(min_len=4),
                         Policy.QUERY_AWARE)


def test_node_repr_single_token_trace(tiny_model):
    r = node_repr([7], tiny_model)
    assert r.shape == (16,)
    ref = forward_np(tiny_model, [7], n_blocks=1)[-1]
    np.testing.assert_allclose(r.numpy(), ref, atol=1e-12)
    ids = tokens(9, seed=2)
    np.testing.assert_allclose(node_repr(ids, tiny_model).numpy(), forward_np(tiny_model, ids, n_blocks=1)[-1],
                               atol=1e-12)
    assert torch.equal(node_repr(ids, tiny_model), node_repr(ids, tiny_model))


@settings(max_examples=25, deadline=None)
@given(st.integers(32, 300), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_shape_chain(n_tokens, depth, alpha_leaf, seed):
    model = Transformer(TINY, seed=0)
    sched = schedule_for(depth, alpha_leaf)
    states = compress_context(tokens(n_tokens, seed), model, 64, sched, SplitParams(min_len=4, gamma=5),
                              deterministic=False, seed=seed)
    assert sum(s.tree.chunk_len for s in states) == n_tokens
    for s in states:
        assert isinstance(s, ChunkState)
        for part in s.parts:
            n = part.source_node
            assert part.length == len(downsample_indices(n.length, sched.alpha(n.level)))
        assert s.total_len == tree_compressed_length(s.tree, sched)
        assert s.keys.shape == (TINY.shared_layers, s.total_len, TINY.d_model)
