import numpy as np
import pytest

from unipert.encoder import EncoderDims, ToyEncoder, as_stack, make_ensemble
from unipert.errors import DuplicateSeedError, ShapeMismatchError
from unipert.tensorops import finite_diff_grad


def test_shape_contract(rng):
    enc = ToyEncoder(5)  # defaults: 32x32x3, patch 8, d 16
    out = enc.forward(rng.uniform(0, 1, size=(32, 32, 3)))
    assert out.tokens.shape == (16, 16)
    assert out.global_feat.shape == (16,)
    assert out.attention_map.shape == (4, 4)
    assert abs(out.attention_map.sum() - 1.0) < 1e-9
    assert out.attention_map.min() >= 0.0


def test_constant_image_uniform_attention():
    enc = ToyEncoder(5)
    out = enc.forward(np.full((32, 32, 3), 0.5))
    assert np.abs(out.attention_map - 1.0 / 16).max() < 1e-9


def test_attention_is_distribution_for_random_inputs(rng):
    enc = ToyEncoder(3)
    for _ in range(20):
        out = enc.forward(rng.uniform(-0.1, 1.1, size=(32, 32, 3)))
        assert out.attention_map.min() >= 0.0
        assert abs(out.attention_map.sum() - 1.0) < 1e-9


def test_different_seeds_different_tokens(rng):
    img = rng.uniform(0, 1, size=(32, 32, 3))
    t1 = ToyEncoder(1).forward(img).tokens
    t2 = ToyEncoder(2).forward(img).tokens
    assert not np.allclose(t1, t2)


def test_same_seed_identical_params():
    a, b = ToyEncoder(7), ToyEncoder(7)
    assert np.array_equal(a.patch_embed, b.patch_embed)
    assert np.array_equal(a.wo, b.wo)


def test_global_feat_is_token_mean(rng):
    out = ToyEncoder(9).forward(rng.uniform(0, 1, size=(32, 32, 3)))
    assert np.allclose(out.global_feat, out.tokens.mean(axis=0), atol=1e-12)


def test_make_ensemble():
    encs = make_ensemble([1, 2, 3])
    assert len(encs) == 3
    assert not np.array_equal(encs[0].patch_embed, encs[1].patch_embed)
    with pytest.raises(DuplicateSeedError):
        make_ensemble([1, 1])
    with pytest.raises(ValueError):
        make_ensemble([])


def test_shape_mismatch_errors(tiny_dims):
    enc = ToyEncoder(1, tiny_dims)
    with pytest.raises(ShapeMismatchError):
        enc.forward(np.zeros((9, 8, 3)))
    with pytest.raises(ShapeMismatchError):
        enc.backward_to_input(np.zeros((8, 8, 3)), np.zeros((3, 6)), np.zeros(6))


def test_zero_cotangent_zero_gradient(tiny_dims, rng):
    enc = ToyEncoder(1, tiny_dims)
    img = rng.uniform(0, 1, size=(8, 8, 3))
    grad = enc.backward_to_input(img, np.zeros((4, 6)), np.zeros(6))
    assert np.array_equal(grad, np.zeros((8, 8, 3)))


def test_vjp_linearity(tiny_dims, rng):
    enc = ToyEncoder(1, tiny_dims)
    img = rng.uniform(0, 1, size=(8, 8, 3))
    g1, g2 = rng.normal(size=(2, 4, 6))
    h1, h2 = rng.normal(size=(2, 6))
    combined = enc.backward_to_input(img, g1 + g2, h1 + h2)
    separate = enc.backward_to_input(img, g1, h1) + enc.backward_to_input(img, g2, h2)
    assert np.allclose(combined, separate, atol=1e-10)


def test_vjp_against_finite_differences(tiny_dims, tiny_encoders, rng):
    for enc in tiny_encoders:
        for _ in range(50):
            img = rng.uniform(0, 1, size=(8, 8, 3))
            gt = rng.normal(size=(4, 6))
            gg = rng.normal(size=(6,))

            def loss(x):
                out = enc.forward(x)
                return float((out.tokens * gt).sum() + out.global_feat @ gg)

            analytic = enc.backward_to_input(img, gt, gg)
            fd = finite_diff_grad(loss, img, 1e-5)
            rel = np.abs(analytic - fd).max() / np.abs(fd).max()
            assert rel < 1e-4


def test_vjp_single_patch_image_tight_tolerance(rng):
    # smallest geometry: one 2x2 patch, so the chain is fully hand-checkable
    dims = EncoderDims(height=2, width=2, channels=1, patch=2, dim=3)
    enc = ToyEncoder(4, dims)
    img = rng.uniform(0, 1, size=(2, 2, 1))
    gt = rng.normal(size=(1, 3))
    gg = rng.normal(size=(3,))

    def loss(x):
        out = enc.forward(x)
        return float((out.tokens * gt).sum() + out.global_feat @ gg)

    analytic = enc.backward_to_input(img, gt, gg)
    fd = finite_diff_grad(loss, img, 1e-6)
    assert np.abs(analytic - fd).max() / np.abs(fd).max() < 1e-6


def test_patch_permutation_equivariance(rng):
    # no positional embedding: swapping two patch contents permutes tokens
    enc = ToyEncoder(6)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    swapped = img.copy()
    a, b = (0, slice(0, 8), slice(0, 8)), (0, slice(8, 16), slice(16, 24))
    block_a = img[0:8, 0:8].copy()
    swapped[0:8, 0:8] = img[8:16, 16:24]
    swapped[8:16, 16:24] = block_a

    base = enc.forward(img)
    perm = enc.forward(swapped)
    # patch grid is 4x4 row-major: (0,0) -> token 0, (1,2) -> token 6
    expect = base.tokens.copy()
    expect[[0, 6]] = expect[[6, 0]]
    assert np.allclose(perm.tokens, expect, atol=1e-10)
    attn_expect = base.attention_map.ravel().copy()
    attn_expect[[0, 6]] = attn_expect[[6, 0]]
    assert np.allclose(perm.attention_map.ravel(), attn_expect, atol=1e-12)
    assert np.allclose(perm.global_feat, base.global_feat, atol=1e-12)


def test_as_stack_toy_only(tiny_encoders):
    stack = as_stack(tuple(tiny_encoders))
    assert stack is not None
    assert stack[0].shape == (2, 48, 6)

    class Stub:
        dims = tiny_encoders[0].dims

    assert as_stack((tiny_encoders[0], Stub())) is None
