import itertools

import numpy as np
import pytest

from scalednl.autodiff import backward, finite_diff, grad_check, half_sq_loss, rel_error
from scalednl.blocks import AttentionConfig, FeatureMap, _forward, init_embeddings
from scalednl.tensor import DimensionError, Rng


def _setup(variant="scaled_nl", heads=1, residual=True, init="he", seed=0, c=4, hw=(3, 3)):
    cfg = AttentionConfig(variant, channels=c, heads=heads, residual=residual, init=init)
    rng = Rng(seed)
    x = FeatureMap.random(*hw, c, rng)
    return x, init_embeddings(cfg, rng), cfg


def test_finite_diff_linear_and_quadratic():
    p = Rng(0).normal((3, 4))
    np.testing.assert_allclose(finite_diff(np.sum, p), np.ones_like(p), atol=1e-9)
    np.testing.assert_allclose(finite_diff(lambda q: 0.5 * np.sum(q * q), p), p, atol=1e-8)


def test_finite_diff_does_not_touch_param():
    p = Rng(0).normal(5)
    before = p.copy()
    finite_diff(np.sum, p)
    np.testing.assert_array_equal(p, before)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff(np.sum, np.zeros(2), h=0.0)


def test_rel_error_floor():
    assert rel_error([1e-12], [0.0]) == pytest.approx(1e-4)
    assert rel_error([2.0], [1.0]) == 0.5


@pytest.mark.parametrize("variant", ["softmax_nl", "scaled_nl"])
def test_zero_upstream_gives_zero_gradients(variant):
    x, emb, cfg = _setup(variant)
    g = backward(x, emb, cfg, np.zeros_like(x.values))
    for v in g.as_dict().values():
        assert np.all(v == 0)


def test_zero_values_annihilate_query_key_grads():
    x, emb, cfg = _setup("scaled_nl")
    emb = emb.replace(w_g=np.zeros_like(emb.w_g))
    g = backward(x, emb, cfg, Rng(1).normal(x.values.shape))
    assert np.all(g.d_w_theta == 0) and np.all(g.d_w_phi == 0)


def test_upstream_shape_checked():
    x, emb, cfg = _setup()
    with pytest.raises(DimensionError):
        backward(x, emb, cfg, np.zeros((2, 2)))


def test_ablated_scopes_have_no_backward():
    cfg = AttentionConfig(channels=4, scope="direction_only")
    x = FeatureMap.random(2, 2, 4, Rng(0))
    with pytest.raises(NotImplementedError):
        backward(x, init_embeddings(cfg, Rng(0)), cfg, x.values)


@pytest.mark.parametrize("variant", ["softmax_nl", "scaled_nl"])
def test_scaled_loss_gradient_matches_finite_differences(variant):
    x, emb, cfg = _setup(variant, seed=3)
    y, _ = _forward(x.values, emb, cfg)
    g = backward(x, emb, cfg, y)
    num = finite_diff(lambda w: half_sq_loss(x.values, emb.replace(w_phi=w), cfg), emb.w_phi)
    assert rel_error(g.d_w_phi, num) <= 1e-5


@pytest.mark.parametrize(
    "variant,heads,residual",
    list(itertools.product(["softmax_nl", "scaled_nl"], [1, 2, 4], [True, False])),
)
def test_grad_check_grid(variant, heads, residual):
    rep = grad_check(AttentionConfig(variant, channels=4, heads=heads, residual=residual), (3, 3), 0)
    assert rep.passed, rep.errors
    assert set(rep.errors) == {"w_theta", "w_phi", "w_g", "w_out", "x"}


def test_grad_check_softmax_small():
    rep = grad_check(AttentionConfig("softmax_nl", channels=4, embed_channels=2), (2, 2), 0)
    assert rep.max_error <= 1e-4


@pytest.mark.parametrize("residual", [True, False])
def test_grad_check_zero_init(residual):
    rep = grad_check(AttentionConfig("scaled_nl", channels=4, init="zeros", residual=residual), (3, 3), 0)
    assert rep.passed
    assert np.all(rep.analytic["w_out"] == 0)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_gradients_independent_of_scaled_mode(heads):
    x, emb, cfg = _setup("scaled_nl", heads=heads, seed=9)
    up = Rng(10).normal(x.values.shape)
    a = backward(x, emb, cfg, up, "associative").as_dict()
    m = backward(x, emb, cfg, up, "materialized").as_dict()
    for k in a:
        np.testing.assert_allclose(a[k], m[k], rtol=0, atol=1e-10 * max(1.0, np.max(np.abs(m[k]))))


def test_backward_deterministic():
    x, emb, cfg = _setup("softmax_nl", heads=2)
    up = Rng(4).normal(x.values.shape)
    a = backward(x, emb, cfg, up).as_dict()
    b = backward(x, emb, cfg, up).as_dict()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
