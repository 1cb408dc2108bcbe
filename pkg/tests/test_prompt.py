import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from wris.prompt import (
    PromptParameters,
    PromptShapeError,
    apply_prompt,
    attention_maps,
    bilateral_prompt,
    prompt_residuals,
)


def _params(c, seed=0, axis="query", alpha=0.1, beta=0.1, dtype=torch.float64):
    p = PromptParameters(c, alpha, beta, axis, generator=torch.Generator().manual_seed(seed))
    return p.to(dtype)


def _inputs(b, n_pix, n_q, c, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    v = torch.nn.functional.normalize(torch.randn(b, n_pix, c, generator=g, dtype=dtype), dim=-1)
    l = torch.nn.functional.normalize(torch.randn(b, n_q, c, generator=g, dtype=dtype), dim=-1)
    return v, l


def _w(p, name):
    return oracles.as_lists(getattr(p, name).detach())


@pytest.mark.parametrize("axis", ["query", "pixel"])
def test_attention_matches_loop_oracle(axis):
    for seed in range(100):
        p = _params(4, seed, axis)
        v, l = _inputs(1, 4, 2, 4, seed)
        attn_l, attn_v = attention_maps(v, l, p)
        ref_l, ref_v = oracles.attention(
            oracles.as_lists(v[0]), oracles.as_lists(l[0]), _w(p, "w1_v"), _w(p, "w2_v"), _w(p, "w1_l"), _w(p, "w2_l"), axis
        )
        np.testing.assert_allclose(attn_l[0].detach().numpy(), ref_l, atol=1e-6)
        np.testing.assert_allclose(attn_v[0].detach().numpy(), ref_v, atol=1e-6)


def test_residuals_match_loop_oracle():
    for seed in range(100):
        p = _params(4, seed)
        v, l = _inputs(1, 4, 2, 4, seed)
        attn_l, attn_v = attention_maps(v, l, p)
        v_prime, l_prime = prompt_residuals(v, l, attn_l, attn_v, p)
        ref_v, ref_l = oracles.residuals(
            oracles.as_lists(v[0]), oracles.as_lists(l[0]), oracles.as_lists(attn_l[0].detach()),
            oracles.as_lists(attn_v[0].detach()), _w(p, "w3_v"), _w(p, "w3_l"),
        )
        np.testing.assert_allclose(v_prime[0].detach().numpy(), ref_v, atol=1e-6)
        np.testing.assert_allclose(l_prime[0].detach().numpy(), ref_l, atol=1e-6)


def test_single_pixel_attention_is_one():
    p = _params(4)
    v, l = _inputs(1, 1, 3, 4, 0)
    attn_l, _ = attention_maps(v, l, p)
    assert torch.allclose(attn_l, torch.ones_like(attn_l))


def test_equal_logits_give_uniform_attention():
    c = 4
    p = _params(c)
    with torch.no_grad():
        for name in p.NAMES:
            getattr(p, name).copy_(torch.eye(c, dtype=torch.float64))
    v = torch.tensor([[[1.0, 0, 0, 0], [0, 1.0, 0, 0], [-1.0, 0, 0, 0]]], dtype=torch.float64)
    l = torch.tensor([[[0, 0, 1.0, 0]]], dtype=torch.float64)
    attn_l, _ = attention_maps(v, l, p)
    assert torch.allclose(attn_l, torch.full_like(attn_l, 1 / 3))


def test_query_axis_softmax_is_all_ones():
    p = _params(6, axis="query")
    v, l = _inputs(2, 9, 3, 6, 1)
    _, attn_v = attention_maps(v, l, p)
    assert torch.equal(attn_v, torch.ones_like(attn_v))


def test_pixel_axis_softmax_sums_to_one():
    p = _params(6, axis="pixel")
    v, l = _inputs(2, 9, 3, 6, 1)
    attn_l, attn_v = attention_maps(v, l, p)
    assert (attn_v.sum(-1) - 1).abs().max() < 1e-6
    assert (attn_l.sum(-1) - 1).abs().max() < 1e-6


def test_one_hot_attention_selects_row():
    p = _params(4)
    v, l = _inputs(1, 5, 1, 4, 2)
    attn_l = torch.zeros(1, 1, 5, dtype=torch.float64)
    attn_l[0, 0, 3] = 1
    _, l_prime = prompt_residuals(v, l, attn_l, torch.ones(1, 1, 5, dtype=torch.float64), p)
    assert torch.allclose(l_prime[0, 0], (v @ p.w3_v)[0, 3])


def test_uniform_attn_v_gives_identical_positions():
    p = _params(4, axis="pixel")
    v, l = _inputs(1, 6, 1, 4, 3)
    attn_v = torch.full((1, 1, 6), 1 / 6, dtype=torch.float64)
    v_prime, _ = prompt_residuals(v, l, torch.full((1, 1, 6), 1 / 6, dtype=torch.float64), attn_v, p)
    assert torch.allclose(v_prime[0, 0], v_prime[0, 0, :1].expand(6, -1))


def test_apply_prompt_examples():
    v, l = _inputs(1, 4, 2, 3, 4)
    vp = torch.randn(1, 2, 4, 3, dtype=torch.float64)
    lp = torch.randn(1, 2, 3, dtype=torch.float64)
    v_hat, l_hat = apply_prompt(v, l, vp, lp, 0.0, 0.0)
    assert torch.equal(v_hat, v.unsqueeze(1).expand_as(vp)) and torch.equal(l_hat, l)
    v_hat, _ = apply_prompt(v, l, -v.unsqueeze(1).expand_as(vp), lp, 1.0, 0.0)
    assert torch.equal(v_hat, torch.zeros_like(v_hat))
    v_hat, l_hat = apply_prompt(v, l, vp, lp, 0.1, 0.1)
    assert (v_hat - (v.unsqueeze(1) + 0.1 * vp)).abs().max() < 1e-7
    assert (l_hat - (l + 0.1 * lp)).abs().max() < 1e-7


def test_unilateral_reductions():
    p = _params(5)
    v, l = _inputs(2, 4, 3, 5, 5)
    out = bilateral_prompt(v, l, p, enable_t2v=True, enable_v2t=False)
    assert torch.equal(out.l_hat, l)
    out = bilateral_prompt(v, l, p, enable_t2v=False, enable_v2t=True)
    assert torch.equal(out.v_hat, v.unsqueeze(1).expand_as(out.v_hat))


def test_shape_mismatch_rejected():
    p = _params(4)
    with pytest.raises(PromptShapeError):
        attention_maps(torch.randn(1, 4, 3), torch.randn(1, 2, 4), p)
    v, l = _inputs(1, 4, 2, 4, 0)
    with pytest.raises(PromptShapeError):
        prompt_residuals(v, l, torch.ones(1, 2, 3), torch.ones(1, 2, 4), p)


def test_non_finite_logits_rejected():
    p = _params(4)
    v, l = _inputs(1, 4, 2, 4, 0)
    v[0, 0, 0] = float("inf")
    with pytest.raises(FloatingPointError):
        attention_maps(v, l, p)


def test_invalid_axis_rejected():
    with pytest.raises(ValueError):
        PromptParameters(4, attn_v_axis="both")


def test_parameter_init_is_seeded_and_scaled():
    a, b = _params(16, seed=7), _params(16, seed=7)
    for name in PromptParameters.NAMES:
        assert torch.equal(getattr(a, name), getattr(b, name))
        assert getattr(a, name).abs().max() <= 1 / 4


@settings(max_examples=40, deadline=None)
@given(n_pix=st.integers(1, 12), n_q=st.integers(1, 4), c=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_attention_rows_are_distributions(n_pix, n_q, c, seed):
    p = _params(c, seed, axis="pixel")
    v, l = _inputs(2, n_pix, n_q, c, seed)
    attn_l, attn_v = attention_maps(v, l, p)
    for a in (attn_l, attn_v):
        assert (a >= 0).all()
        assert (a.sum(-1) - 1).abs().max() < 1e-6
