import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from treekv.numerics import (ConfigError, DimensionError, UsageError, attention, counting,
                             grad_check, matmul, rms_norm, rope_apply, softmax_rows)

T = lambda x: torch.tensor(x, dtype=torch.float64)


def brute_attention(q, k, v, causal=False):
    q, k, v = q.tolist(), k.tolist(), v.tolist()
    out = []
    for i, qi in enumerate(q):
        keys = range(i + 1) if causal else range(len(k))
        logits = [sum(a * b for a, b in zip(qi, k[j])) / math.sqrt(len(qi)) for j in keys]
        mx = max(logits)
        w = [math.exp(s - mx) for s in logits]
        z = sum(w)
        out.append([sum(w[n] / z * v[j][c] for n, j in enumerate(keys)) for c in range(len(v[0]))])
    return T(out)


def test_matmul_examples():
    assert torch.equal(matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]])), T([[3, 4], [5, 6]]))
    assert torch.equal(matmul(T([[1, 2]]), T([[3], [4]])), T([[11]]))
    a = torch.randn(3, 5, dtype=torch.float64)
    assert torch.equal(matmul(a, torch.zeros(5, 2, dtype=torch.float64)), torch.zeros(3, 2, dtype=torch.float64))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_examples():
    assert torch.allclose(softmax_rows(T([[0, 0]])), T([[0.5, 0.5]]), atol=0, rtol=0)
    assert torch.equal(softmax_rows(T([[1000, 1000]])), T([[0.5, 0.5]]))
    assert torch.allclose(softmax_rows(T([[0, math.log(3)]])), T([[0.25, 0.75]]), atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_rows_sum_and_shift_invariance(row, c):
    x = T([row])
    p = softmax_rows(x)
    assert abs(float(p.sum()) - 1) <= 1e-12
    assert torch.allclose(softmax_rows(x + c), p, atol=1e-12)


def test_rope_position_zero_is_identity():
    x = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(rope_apply(x, [0, 0, 0]), x)


def test_rope_quarter_turn():
    # pair 1 of a 4-dim vector turns by p * base^(-1/2); base = 4/pi^2 gives pi/2 at p = 1
    out = rope_apply(T([[0, 0, 1, 0]]), [1], theta_base=4 / math.pi ** 2)
    assert torch.allclose(out, T([[0, 0, 0, 1]]), atol=1e-15)


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        rope_apply(torch.zeros(2, 3), [0, 1])


@settings(max_examples=50)
@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 2**31 - 1))
def test_rope_isometry_and_composition(p1, p2, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 16, generator=g, dtype=torch.float64)
    once = rope_apply(x, [p1 + p2])
    twice = rope_apply(rope_apply(x, [p1]), [p2])
    assert torch.allclose(once, twice, atol=1e-10)
    pair_norm = lambda y: y.view(-1, 2).norm(dim=-1)
    assert torch.allclose(pair_norm(once), pair_norm(x), atol=1e-12)


def test_rms_norm_examples():
    g = torch.ones(4, dtype=torch.float64)
    assert torch.allclose(rms_norm(torch.ones(1, 4, dtype=torch.float64), g, 1e-300), torch.ones(1, 4, dtype=torch.float64))
    out = rms_norm(T([[3, 4]]), torch.ones(2, dtype=torch.float64), 1e-300)
    assert torch.allclose(out, T([[3, 4]]) / math.sqrt(12.5), atol=1e-15)
    assert torch.equal(rms_norm(torch.zeros(1, 4, dtype=torch.float64), g, 1e-6), torch.zeros(1, 4, dtype=torch.float64))


def test_attention_single_key_broadcasts_value():
    q = torch.randn(5, 4, dtype=torch.float64)
    k = torch.randn(1, 4, dtype=torch.float64)
    v = T([[1, 2, 3, 4]])
    assert torch.allclose(attention(q, k, v), v.expand(5, 4), atol=1e-15)


def test_attention_uniform_logits_average_values():
    q = T([[1, 0]])
    k = T([[0, 1], [0, -1], [0, 3]])
    v = torch.randn(3, 2, dtype=torch.float64)
    assert torch.allclose(attention(q, k, v), v.mean(0, keepdim=True), atol=1e-15)


@pytest.mark.parametrize("causal", [False, True])
def test_attention_matches_brute_force(causal):
    g = torch.Generator().manual_seed(3)
    q, k, v = (torch.randn(2, 2, generator=g, dtype=torch.float64) for _ in range(3))
    assert torch.allclose(attention(q, k, v, causal=causal), brute_attention(q, k, v, causal), atol=1e-14)
    q, k, v = (torch.randn(7, 6, generator=g, dtype=torch.float64) for _ in range(3))
    assert torch.allclose(attention(q, k, v, causal=causal), brute_attention(q, k, v, causal), atol=1e-12)


def test_attention_causal_needs_square():
    with pytest.raises(UsageError):
        attention(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(3, 4), causal=True)


def test_attention_key_mask_equals_dropping_keys():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([True, False, True])
    assert torch.allclose(attention(q, k, v, key_mask=mask), attention(q, k[mask], v[mask]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.booleans(), st.booleans())
def test_fused_and_explicit_attention_agree(seed, causal, masked):
    """Outside `counting()` attention may take torch's fused kernel; inside it
    always materialises the scores. Values and gradients must agree."""
    g = torch.Generator().manual_seed(seed)
    t = int(torch.randint(1, 9, (1,), generator=g))
    q, k, v = (torch.randn(2, 3, t, 4, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(3))
    mask = None
    if masked:
        mask = torch.rand(2, t, generator=g) < 0.7
        mask[:, 0] = True
    fast = attention(q, k, v, causal=causal, key_mask=mask)
    gf = torch.autograd.grad(fast.pow(2).sum(), (q, k, v))
    with counting():
        slow = attention(q, k, v, causal=causal, key_mask=mask)
    gs = torch.autograd.grad(slow.pow(2).sum(), (q, k, v))
    assert torch.allclose(fast, slow, atol=1e-12, rtol=0)
    for a, b in zip(gf, gs):
        assert torch.allclose(a, b, atol=1e-12, rtol=0)


def test_fully_masked_row_is_zero_without_counting():
    q, k, v = (torch.randn(1, 2, 3, 4, dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([[False, False, False], [True, False, True]])
    out = attention(q, k, v, key_mask=mask)
    assert torch.equal(out[0], torch.zeros(2, 3, 4, dtype=torch.float64))
    assert torch.isfinite(out).all()


def test_counting_tallies_attention_and_matmul():
    q = torch.zeros(2, 3, 5, 4, dtype=torch.float64)
    k = torch.zeros(2, 3, 7, 4, dtype=torch.float64)
    with counting() as c:
        attention(q, k, k)
        matmul(torch.zeros(5, 6), torch.zeros(6, 2))
    assert c.score_macs() == 2 * 3 * 5 * 7 * 4
    assert c.attention_macs() == 2 * 2 * 3 * 5 * 7 * 4
    assert c.matmul_macs == 5 * 6 * 2
    assert c.peak_bytes > 0


def test_grad_check_linear_exact():
    w = torch.randn(6, dtype=torch.float64, requires_grad=True)
    c = torch.randn(6, dtype=torch.float64)
    assert grad_check(lambda: (w * c).sum(), [w], h=1e-5) <= 1e-10


def test_grad_check_rejects_non_scalar():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(UsageError):
        grad_check(lambda: w * 2, [w])


def test_frozen_parameter_gets_no_gradient():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    frozen = torch.randn(3, dtype=torch.float64, requires_grad=False)
    (w * frozen).sum().backward()
    assert frozen.grad is None
    frozen.requires_grad_(True)
    frozen.grad = None
    with torch.no_grad():
        y = (w * frozen).sum()
    assert not y.requires_grad


def _primitive_cases():
    g = torch.Generator().manual_seed(11)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64).requires_grad_(True)
    a, b = r(3, 4), r(4, 2)
    yield "matmul", (lambda: (matmul(a, b) ** 2).sum()), [a, b]
    x = r(3, 5)
    yield "softmax", (lambda: (softmax_rows(x) * torch.arange(5.0, dtype=torch.float64)).sum()), [x]
    y = r(4, 8)
    yield "rope", (lambda: (rope_apply(y, [0, 3, 7, 11]) ** 3).sum()), [y]
    z, gain = r(3, 6), r(6)
    yield "rms_norm", (lambda: (rms_norm(z, gain) ** 3).sum()), [z, gain]
    q, k, v = r(4, 4), r(4, 4), r(4, 4)
    yield "attention_causal", (lambda: (attention(q, k, v, causal=True) ** 2).sum()), [q, k, v]
    q2, k2, v2 = r(2, 4), r(5, 4), r(5, 4)
    yield "attention_cross", (lambda: (attention(q2, k2, v2) ** 2).sum()), [q2, k2, v2]


@pytest.mark.parametrize("name,f,params", list(_primitive_cases()), ids=lambda x: x if isinstance(x, str) else "")
def test_primitive_backward_matches_central_differences(name, f, params):
    assert grad_check(f, params, h=1e-6) <= 1e-6


def test_operations_are_deterministic():
    g1 = torch.Generator().manual_seed(5)
    g2 = torch.Generator().manual_seed(5)
    x1 = torch.randn(6, 8, generator=g1, dtype=torch.float64)
    x2 = torch.randn(6, 8, generator=g2, dtype=torch.float64)
    a = attention(rope_apply(x1, list(range(6))), x1, x1, causal=True)
    b = attention(rope_apply(x2, list(range(6))), x2, x2, causal=True)
    assert np.array_equal(a.numpy(), b.numpy())
