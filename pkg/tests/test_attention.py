"""Masked attention semantics and block gradients."""

import numpy as np
import pytest
from conftest import numeric_grad, rel_error

from obbdet import autodiff as ad
from obbdet.attention import (
    AttentionParams,
    BlockParams,
    MaskTargets,
    tbam,
    transformer_block,
)
from obbdet.autodiff import Tensor


def small_attn(rng, d_model=6, heads=2):
    return AttentionParams.init(rng, d_model, heads)


def test_mask_targets_default_is_value_only():
    t = MaskTargets()
    assert (t.q, t.k, t.v) == (False, False, True)
    assert str(t) == "v"


def test_mask_targets_parsing():
    t = MaskTargets.from_string("qk")
    assert (t.q, t.k, t.v) == (True, True, False)
    assert str(MaskTargets.from_string("")) == ""
    with pytest.raises(ValueError, match="q/k/v"):
        MaskTargets.from_string("qx")


def test_heads_must_divide_width(rng):
    with pytest.raises(ValueError, match="divisible"):
        AttentionParams.init(rng, 6, 4)


def test_all_ones_mask_is_bit_identical_to_unmasked(rng):
    params = small_attn(rng)
    tokens = Tensor(rng.normal(size=(9, 6)))
    ones = np.ones(9)
    masked = tbam(tokens, ones, params, MaskTargets(q=True, k=True, v=True))
    plain = tbam(tokens, ones, params, MaskTargets.none())
    assert np.array_equal(masked.data, plain.data)


def test_all_zeros_mask_v_only_leaves_bias_rows(rng):
    params = small_attn(rng)
    tokens = Tensor(rng.normal(size=(9, 6)))
    out = tbam(tokens, np.zeros(9), params, MaskTargets())
    np.testing.assert_allclose(out.data, np.tile(params.bo.data, (9, 1)), atol=1e-15)


def test_attention_rows_sum_to_one_under_any_mask(rng):
    params = small_attn(rng)
    tokens = Tensor(rng.normal(size=(9, 6)))
    mask = rng.integers(0, 2, 9).astype(float)
    _, probs = tbam(tokens, mask, params, MaskTargets(), return_probs=True)
    for p in probs:
        np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)


def test_two_token_hand_computed_chain():
    wq = np.array([[1.0, 0.0], [0.0, 2.0]])
    wk = np.array([[0.5, 1.0], [1.0, 0.0]])
    wv = np.array([[1.0, 1.0], [0.0, 1.0]])
    wo = np.array([[2.0, 0.0], [1.0, 1.0]])
    bo = np.array([0.1, -0.2])
    params = AttentionParams(
        wq=Tensor(wq), bq=Tensor(np.zeros(2)),
        wk=Tensor(wk), bk=Tensor(np.zeros(2)),
        wv=Tensor(wv), bv=Tensor(np.zeros(2)),
        wo=Tensor(wo), bo=Tensor(bo), heads=1,
    )
    x = np.array([[1.0, 0.5], [-0.5, 1.0]])
    am = np.array([1.0, 0.5])

    q, k, v = x @ wq, x @ wk, x @ wv
    v = v * am[:, None]
    logits = q @ k.T / np.sqrt(2.0)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    want = (p @ v) @ wo + bo

    out = tbam(Tensor(x), am, params, MaskTargets())
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_token_permutation_equivariance(rng):
    params = small_attn(rng)
    x = rng.normal(size=(9, 6))
    am = rng.uniform(0, 1, 9)
    perm = rng.permutation(9)
    out = tbam(Tensor(x), am, params, MaskTargets(q=True, v=True)).data
    out_p = tbam(Tensor(x[perm]), am[perm], params, MaskTargets(q=True, v=True)).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_mask_scaling_linearity_v_only(rng):
    params = small_attn(rng)
    params.bo = Tensor(np.zeros(6))
    x = Tensor(rng.normal(size=(9, 6)))
    am = rng.uniform(0, 1, 9)
    base = tbam(x, am, params, MaskTargets()).data
    scaled = tbam(x, 3.0 * am, params, MaskTargets()).data
    np.testing.assert_allclose(scaled, 3.0 * base, atol=1e-9)


def test_mask_length_mismatch(rng):
    params = small_attn(rng)
    with pytest.raises(ValueError, match="8 cells .* 9 tokens"):
        tbam(Tensor(rng.normal(size=(9, 6))), np.ones(8), params, MaskTargets())


def test_block_with_zero_projections_is_identity(rng):
    bp = BlockParams.init(rng, 6, 2)
    bp.attn.wo = Tensor(np.zeros((6, 6)))
    bp.attn.bo = Tensor(np.zeros(6))
    bp.mlp_w2 = Tensor(np.zeros((24, 6)))
    bp.mlp_b2 = Tensor(np.zeros(6))
    x = rng.normal(size=(9, 6))
    out = transformer_block(Tensor(x), np.ones(9), bp, MaskTargets())
    np.testing.assert_array_equal(out.data, x)


def test_block_all_ones_mask_matches_maskless(rng):
    bp = BlockParams.init(rng, 6, 2)
    x = Tensor(rng.normal(size=(9, 6)))
    a = transformer_block(x, np.ones(9), bp, MaskTargets(q=True, k=True, v=True))
    b = transformer_block(x, np.ones(9), bp, MaskTargets.none())
    assert np.array_equal(a.data, b.data)


def test_block_accepts_grid_shaped_mask(rng):
    bp = BlockParams.init(rng, 6, 2)
    x = Tensor(rng.normal(size=(9, 6)))
    flat = transformer_block(x, np.ones(9), bp, MaskTargets())
    grid = transformer_block(x, np.ones((3, 3)), bp, MaskTargets())
    assert np.array_equal(flat.data, grid.data)


def test_fused_heads_match_per_head_route(rng):
    params = small_attn(rng, d_model=8, heads=4)
    x = Tensor(rng.normal(size=(9, 8)), requires_grad=True)
    am = rng.uniform(0.2, 1.0, 9)
    targets = MaskTargets(q=True, v=True)
    fused = tbam(x, am, params, targets)
    looped, _ = tbam(x, am, params, targets, return_probs=True)
    np.testing.assert_allclose(fused.data, looped.data, atol=1e-12)

    w = ad.constant(rng.normal(size=(9, 8)))
    ad.backward(ad.sum_all(ad.mul(fused, w)))
    g_fused = x.grad.copy()
    x.grad = None
    ad.backward(ad.sum_all(ad.mul(looped, w)))
    np.testing.assert_allclose(g_fused, x.grad, atol=1e-12)


def test_gradients_through_four_stacked_blocks(rng):
    blocks = [BlockParams.init(rng, 6, 2) for _ in range(4)]
    x = Tensor(rng.normal(size=(4, 6)))
    mask = rng.integers(0, 2, 4).astype(float)
    mask[0] = 1.0  # keep at least one live token
    w = rng.normal(size=(4, 6))

    def build():
        h = x
        for bp in blocks:
            h = transformer_block(h, mask, bp, MaskTargets())
        return ad.sum_all(ad.mul(h, ad.constant(w)))

    params = [t for bp in blocks for t in bp.named("b").values()]
    ad.zero_grads(params)
    ad.backward(build())
    checked = 0
    for p in params[:: 7]:  # spot-check a spread of parameters; FD is slow
        num = numeric_grad(lambda: build().item(), p, h=1e-5)
        assert rel_error(p.grad, num) < 1e-3
        checked += 1
    assert checked >= 10
