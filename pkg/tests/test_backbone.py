import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clipos.backbone import (BackboneConfig, ContextConfig, ToyBackbone, VVAttentionConfig, build_backbone,
                             check_grid, l2_normalize, patch_context_incorporate, vv_attention)
from clipos.errors import ConfigError, InputContractError, NumericError
from oracles import conv_mean_oracle, two_token_vv

grids = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))


def _grid(rows, cols, dim, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(rows, cols, dim, generator=g, dtype=torch.float64)


# patch-context incorporation

def test_context_single_channel_example():
    # 3x3 grid, one channel, centre 9, rest 0: centre mean is 1 -> 9.1, corners see 1 -> 0.1
    grid = torch.zeros(3, 3, 1, dtype=torch.float64)
    grid[1, 1, 0] = 9.0
    out = patch_context_incorporate(grid, ContextConfig(beta_ctx=0.1, padding="zero"))
    expected = conv_mean_oracle(grid.numpy(), 0.1, "zero")
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)
    assert out[1, 1, 0] == pytest.approx(9.1)
    assert out[0, 0, 0] == pytest.approx(0.1)


def test_context_constant_grid_replicate():
    grid = torch.full((4, 5, 3), 2.0, dtype=torch.float64)
    out = patch_context_incorporate(grid, ContextConfig(beta_ctx=0.5))
    # replicate padding keeps a constant map constant: c + beta * c
    assert torch.allclose(out, torch.full_like(grid, 3.0))


def test_beta_zero_returns_copy():
    grid = _grid(3, 4, 2, 0)
    out = patch_context_incorporate(grid, ContextConfig(beta_ctx=0.0))
    assert torch.equal(out, grid)
    out[0, 0, 0] = 99.0
    assert grid[0, 0, 0] != 99.0


@settings(max_examples=60, deadline=None)
@given(grids, st.floats(0, 2), st.sampled_from(["replicate", "zero"]))
def test_context_matches_oracle(shape, beta, padding):
    grid = _grid(*shape)
    out = patch_context_incorporate(grid, ContextConfig(beta, padding))
    np.testing.assert_allclose(out.numpy(), conv_mean_oracle(grid.numpy(), beta, padding), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(grids, st.floats(0, 2), st.floats(-3, 3))
def test_context_is_linear(shape, beta, a):
    x = _grid(*shape)
    y = _grid(*shape[:3], shape[3] + 1)
    cfg = ContextConfig(beta)
    lhs = patch_context_incorporate(a * x + y, cfg)
    rhs = a * patch_context_incorporate(x, cfg) + patch_context_incorporate(y, cfg)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_context_batch_dims_pass_through():
    g = torch.randn(2, 3, 5, 4, 6, dtype=torch.float64)
    cfg = ContextConfig(0.3)
    out = patch_context_incorporate(g, cfg)
    assert out.shape == g.shape
    assert torch.allclose(out[1, 2], patch_context_incorporate(g[1, 2], cfg))


@pytest.mark.parametrize("kw", [{"beta_ctx": -0.1}, {"padding": "reflect"}])
def test_context_config_rejects(kw):
    with pytest.raises(ConfigError):
        ContextConfig(**kw)


def test_check_grid_contracts():
    with pytest.raises(InputContractError):
        check_grid(torch.zeros(3, 3))
    with pytest.raises(InputContractError):
        check_grid(torch.zeros(0, 3, 2))
    bad = torch.zeros(2, 2, 2)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        check_grid(bad)


# v-v attention

def test_vv_two_tokens_against_explicit_softmax():
    v1, v2 = [1.0, 0.0], [0.0, 2.0]
    grid = torch.tensor([[v1, v2]], dtype=torch.float64)
    out = vv_attention(grid, VVAttentionConfig(0.7))
    o1, o2 = two_token_vv(v1, v2, 0.7)
    np.testing.assert_allclose(out[0].numpy(), [o1, o2], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(grids, st.floats(0.05, 2.0))
def test_vv_weights_rows_sum_to_one_and_convex(shape, scale):
    grid = _grid(*shape)
    out, w = vv_attention(grid, VVAttentionConfig(scale), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(w.shape[0], dtype=torch.float64))
    assert (w >= 0).all()
    # outputs are convex combinations: each coordinate inside the input range
    tokens = grid.reshape(-1, grid.shape[-1])
    flat = out.reshape(-1, grid.shape[-1])
    assert (flat <= tokens.max(0).values + 1e-10).all()
    assert (flat >= tokens.min(0).values - 1e-10).all()


@settings(max_examples=40, deadline=None)
@given(grids, st.integers(0, 1000))
def test_vv_permutation_equivariant(shape, pseed):
    grid = _grid(*shape)
    rows, cols, dim = grid.shape
    perm = torch.randperm(rows * cols, generator=torch.Generator().manual_seed(pseed))
    cfg = VVAttentionConfig(0.5)
    tokens = grid.reshape(-1, dim)
    out = vv_attention(grid, cfg).reshape(-1, dim)
    out_p = vv_attention(tokens[perm].reshape(rows, cols, dim), cfg).reshape(-1, dim)
    assert torch.allclose(out_p, out[perm], atol=1e-10)


def test_vv_identical_tokens_fixed_point():
    grid = torch.ones(3, 3, 4, dtype=torch.float64) * 0.3
    assert torch.allclose(vv_attention(grid, VVAttentionConfig(1.0)), grid)


def test_vv_scale_must_be_positive():
    with pytest.raises(ConfigError):
        VVAttentionConfig(0.0)


def test_vv_overflow_is_numeric_error():
    grid = torch.full((2, 2, 2), 1e200, dtype=torch.float64)
    with pytest.raises(NumericError):
        vv_attention(grid, VVAttentionConfig(1e200))


# toy backbone

def test_l2_normalize_zero_vector():
    with pytest.raises(NumericError):
        l2_normalize(torch.zeros(3))


def test_toy_shapes(toy):
    img = torch.randn(2, 3, toy.image_size, toy.image_size, dtype=torch.float64)
    assert toy.encode_patches(img).shape == (2, 4, 4, 16)
    assert toy.patch_features(img).shape == (2, 4, 4, 16)
    assert toy.patch_features(img[0], surgery=False).shape == (4, 4, 16)
    feat = toy.encode_image(img)
    assert feat.shape == (2, 16)
    assert torch.allclose(feat.norm(dim=-1), torch.ones(2, dtype=torch.float64))
    assert toy.native_scale == pytest.approx(1 / math.sqrt(16))


def test_toy_rejects_wrong_image_shape(toy):
    with pytest.raises(InputContractError):
        toy.encode_image(torch.zeros(3, 8, 8))
    with pytest.raises(InputContractError):
        toy.encode_image(torch.zeros(16, 16))


def test_toy_render_inverts_patch_embedding(toy):
    latent = torch.randn(4, 4, 16, dtype=torch.float64)
    img = toy.render(latent)
    assert img.shape == (3, 16, 16)
    tokens = toy._tokens(img[None])[0].reshape(4, 4, 16)
    assert torch.allclose(tokens, latent, atol=1e-10)


def test_toy_surgery_path_composes_context_and_vv(toy):
    img = torch.randn(3, 16, 16, dtype=torch.float64)
    ctx = ContextConfig(0.2)
    values = toy.encode_patches(img)
    mixed = vv_attention(patch_context_incorporate(values, ctx), toy.vv_config())
    expected = mixed.reshape(-1, 16) @ toy.w_o @ toy.w_proj
    got = toy.patch_features(img, surgery=True, context=ctx)
    assert torch.allclose(got.reshape(-1, 16), expected)


def test_toy_deterministic_and_seeded():
    a, b, c = ToyBackbone(seed=3), ToyBackbone(seed=3), ToyBackbone(seed=4)
    assert torch.equal(a.t_gate, b.t_gate)
    assert not torch.equal(a.w_q, c.w_q)
    assert torch.equal(a.word_embedding("teal"), b.word_embedding("teal"))


def test_toy_text_is_linear_in_context(toy):
    ctx1 = torch.randn(4, 16, dtype=torch.float64)
    ctx2 = torch.randn(4, 16, dtype=torch.float64)
    names = ["teal", "amber"]
    f = lambda c: toy.encode_prompts(c, names)  # noqa: E731
    zero = f(torch.zeros_like(ctx1))
    assert torch.allclose(f(ctx1 + ctx2) - zero, (f(ctx1) - zero) + (f(ctx2) - zero), atol=1e-10)


def test_toy_text_length_limit():
    bb = ToyBackbone(text_len=4)
    with pytest.raises(InputContractError):
        bb.encode_prompts(torch.zeros(4, 16, dtype=torch.float64), ["teal"])


def test_toy_vocabulary_restriction():
    bb = ToyBackbone(vocabulary=["teal", "unknown"])
    bb.check_vocabulary(["teal", "unknown"])
    with pytest.raises(ConfigError):
        bb.check_vocabulary(["amber"])


@pytest.mark.parametrize("kw", [{"dim": 100}, {"temperature": 0.0}, {"grid": 0}])
def test_toy_rejects_bad_construction(kw):
    with pytest.raises(ConfigError):
        ToyBackbone(**kw)


def test_build_backbone_toy_and_missing_weights(tmp_path):
    bb = build_backbone(BackboneConfig(grid=2, patch=3, dim=8))
    assert bb.grid == (2, 2) and bb.image_size == 6
    from clipos.errors import ResolutionError

    with pytest.raises(ResolutionError):
        build_backbone(BackboneConfig(name="clip", weights=str(tmp_path / "nope")))
