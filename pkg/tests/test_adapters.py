import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from grwsmooth import adapters as ad
from grwsmooth import grw
from grwsmooth import tensor as tn
from grwsmooth.grw import GrwConfig
from grwsmooth.tensor import Tape, Tensor

EPS = ad.STANDARDIZE_EPS


def numpy_head(Z, head):
    """Plain numpy forward of the attention head, single sequence."""
    x = np.asarray(Z, dtype=float)
    if head.positional:
        x = x + ad.sinusoidal_positions(*x.shape)
    d = x.shape[1]
    for b in head.blocks:
        q, k, v = x @ b.wq, x @ b.wk, x @ b.wv
        att = softmax(q @ k.T / np.sqrt(d), axis=-1)
        x = x + (att @ v) @ b.wo
        x = x + np.maximum(x @ b.w1 + b.b1, 0.0) @ b.w2 + b.b2
    return x.mean(axis=0) @ head.wc + head.bc


def make_head(d=6, classes=3, layers=1, seed=0, positional=False):
    return ad.TemporalHead.init(d, classes, np.random.default_rng(seed), layers, positional)


# ---------------------------------------------------------------- intermediate placement


def test_global_pool_matches_loop():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    naive = np.zeros((2, 3))
    for c in range(2):
        for n in range(3):
            naive[c, n] = sum(x[c, n, k] for k in range(4)) / 4
    np.testing.assert_allclose(ad.global_pool(x).data, naive, rtol=0, atol=1e-15)


def test_global_pool_trivial_cases():
    x = np.random.default_rng(1).normal(size=(3, 5, 1))
    assert np.array_equal(ad.global_pool(x).data, x[..., 0])
    plane = np.broadcast_to(np.arange(15.0).reshape(3, 5, 1), (3, 5, 7))
    np.testing.assert_allclose(ad.global_pool(plane).data, np.arange(15.0).reshape(3, 5), atol=1e-14)
    with pytest.raises(tn.ShapeError):
        ad.global_pool(np.zeros((3, 4)))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 5), st.integers(2, 9))
@settings(max_examples=40)
def test_batch_standardize_stats(seed, B, C, N):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, C, N)) * rng.uniform(0.5, 5, size=(1, C, 1)) + rng.normal(size=(1, C, 1)) * 3
    y = ad.batch_standardize(x).data
    assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-8)
    # mean squared length of a time step's C-vector is mean_c var/(var+eps)
    var = x.var(axis=(0, 2))
    msq = np.mean(np.sum(y * y, axis=1))
    assert msq == pytest.approx(np.mean(var / (var + EPS)), abs=1e-12)
    if var.min() >= 0.1:
        assert 1 - 10 * EPS <= msq <= 1 + 1e-12


def test_batch_standardize_already_standard():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 1, 10))
    x = (x - x.mean()) / x.std()
    np.testing.assert_allclose(ad.batch_standardize(x).data, x, rtol=EPS, atol=0)


def test_batch_standardize_needs_two_samples():
    with pytest.raises(ValueError):
        ad.batch_standardize(np.ones((1, 3, 1)))


def test_batch_standardize_gradient():
    x = np.random.default_rng(4).normal(size=(3, 2, 4))
    w = np.random.default_rng(5).normal(size=(3, 2, 4))
    f = lambda t: tn.sum(ad.batch_standardize(t) * Tensor(w))
    assert tn.grad_check(f, x) < 1e-6


# ---------------------------------------------------------------- final placement


def test_affine_identity_and_oracle():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(7, 4))
    assert np.array_equal(ad.affine_embed(Z, ad.AffineNormalizer.identity(4)).data, Z)
    norm = ad.AffineNormalizer(rng.normal(size=(3, 4)), rng.normal(size=3))
    np.testing.assert_allclose(ad.affine_embed(Z, norm).data, Z @ norm.weight.T + norm.bias, atol=1e-14)
    batched = ad.affine_embed(np.stack([Z, 2 * Z]), norm).data
    np.testing.assert_allclose(batched[1], 2 * Z @ norm.weight.T + norm.bias, atol=1e-13)
    with pytest.raises(tn.ShapeError):
        ad.affine_embed(np.zeros((5, 3)), norm)


def test_bias_only_map_leaves_smooth_loss():
    Z = np.random.default_rng(1).normal(size=(10, 4))
    shifted = ad.affine_embed(Z, ad.AffineNormalizer(np.eye(4), np.array([5.0, -2.0, 0.3, 9.0])))
    cfg = GrwConfig()
    assert abs(float(grw.smooth_loss(shifted, cfg).smooth) - float(grw.smooth_loss(Z, cfg).smooth)) < 1e-10


def test_affine_then_smooth_differentiable():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(10, 3))
    W = rng.normal(size=(3, 3))
    cfg = GrwConfig()
    f_z = lambda t: grw.smooth_loss(ad.affine_embed(t, ad.AffineNormalizer(W, np.zeros(3))), cfg).smooth
    f_w = lambda t: grw.smooth_loss(ad.affine_embed(Z, ad.AffineNormalizer(t, np.zeros(3))), cfg).smooth
    assert tn.grad_check(f_z, Z) < 1e-5
    assert tn.grad_check(f_w, W) < 1e-5


# ---------------------------------------------------------------- head


@pytest.mark.parametrize("layers", [1, 2])
@pytest.mark.parametrize("positional", [False, True])
def test_head_matches_numpy(layers, positional):
    head = make_head(layers=layers, positional=positional, seed=layers)
    Z = np.random.default_rng(7).normal(size=(5, 6))
    np.testing.assert_allclose(ad.head_forward(Z, head).data, numpy_head(Z, head), atol=1e-12)
    batch = np.stack([Z, -Z, 0.5 * Z])
    out = ad.head_forward(batch, head).data
    assert out.shape == (3, 3)
    np.testing.assert_allclose(out[1], numpy_head(-Z, head), atol=1e-12)


def test_head_single_token():
    head = make_head()
    z = np.random.default_rng(8).normal(size=(1, 6))
    b = head.blocks[0]
    x = z + (z @ b.wv) @ b.wo
    x = x + np.maximum(x @ b.w1 + b.b1, 0) @ b.w2 + b.b2
    np.testing.assert_allclose(ad.head_forward(z, head).data, (x @ head.wc + head.bc)[0], atol=1e-13)


def test_head_time_permutation():
    head = make_head()
    rng = np.random.default_rng(9)
    tok = rng.normal(size=6)
    same = np.tile(tok, (5, 1))
    np.testing.assert_allclose(ad.head_forward(same, head).data, ad.head_forward(same[::-1], head).data,
                               rtol=0, atol=1e-14)
    # without positions the head sees a set of steps
    Z = rng.normal(size=(5, 6))
    np.testing.assert_allclose(ad.head_forward(Z, head).data, ad.head_forward(Z[[3, 0, 4, 1, 2]], head).data,
                               atol=1e-13)


def test_head_gradient():
    head = make_head(d=4, layers=2, seed=3)
    Z = np.random.default_rng(10).normal(size=(4, 4))
    w = np.array([0.3, -1.2, 0.8])
    assert tn.grad_check(lambda t: tn.sum(ad.head_forward(t, head) * Tensor(w)), Z) < 1e-5
    wq = head.blocks[0].wq

    def f(t):
        blk = dataclasses.replace(head.blocks[0], wq=t)
        return tn.sum(ad.head_forward(Z, dataclasses.replace(head, blocks=[blk, head.blocks[1]])) * Tensor(w))

    assert tn.grad_check(f, wq) < 1e-5


def test_head_zero_attention():
    head = make_head(seed=4)
    for name in ("wq", "wk", "wv", "wo"):
        setattr(head.blocks[0], name, np.zeros((6, 6)))
    tape = Tape()
    bound, leaves = ad.bind(head, tape)
    z = tape.variable(np.random.default_rng(11).normal(size=(2, 5, 6)))
    out = tn.sum(ad.head_forward(z, bound))
    grads = tape.backward(out)
    assert np.isfinite(out.item())
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_head_layers_validated():
    with pytest.raises(ValueError):
        make_head(layers=3)


# ---------------------------------------------------------------- parameter plumbing


def test_named_parameters_and_bind():
    head = make_head(layers=2, positional=True)
    names = ad.named_parameters(head)
    assert "blocks.1.w2" in names and "wc" in names
    assert "positional" not in names
    assert len(names) == 2 * 8 + 2
    tape = Tape()
    bound, leaves = ad.bind(head, tape)
    assert set(leaves) == set(names)
    assert bound.positional is True
    assert all(np.array_equal(leaves[k].data, names[k]) for k in names)
