import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fediptw.numerics import (
    HIDDEN,
    MlpParams,
    NumericError,
    ShapeError,
    StaleCacheError,
    bce_loss,
    flat_size,
    init_mlp,
    make_rng,
    minibatch_sgd,
    mlp_backward,
    mlp_forward,
    sgd_step,
    sigmoid,
    softplus,
    weighted_batch_grad,
)


def loop_forward(p: MlpParams, x, offset, kind):
    """Scalar re-implementation with explicit loops."""
    z = p.b2 + offset
    for k in range(p.hidden):
        a = p.b1[k]
        for j in range(p.in_dim):
            a += p.w1[k, j] * x[j]
        z += p.w2[0, k] * max(a, 0.0)
    return 1.0 / (1.0 + math.exp(-z)) if kind == "sigmoid" else z


def random_params(rng, in_dim, hidden=HIDDEN, scale=1.0):
    return MlpParams(scale * rng.normal(size=(hidden, in_dim)), scale * rng.normal(size=hidden),
                     scale * rng.normal(size=(1, hidden)), float(scale * rng.normal()))


class TestForward:
    def test_zero_params_give_half(self):
        out, _ = mlp_forward(MlpParams.zeros(4), np.ones(4), 0.0, "sigmoid")
        assert out == 0.5

    def test_offset_passes_through_sigmoid(self):
        out, _ = mlp_forward(MlpParams.zeros(4), np.ones(4), 10.0, "sigmoid")
        assert out == pytest.approx(0.9999546021312976, abs=1e-15)

    def test_linear_head_returns_logit(self):
        out, _ = mlp_forward(MlpParams.zeros(3), np.ones(3), 2.5, "linear")
        assert out == 2.5

    @pytest.mark.parametrize("kind", ["sigmoid", "linear"])
    def test_matches_loop_reimplementation(self, kind):
        rng = make_rng(11)
        for _ in range(10):
            d = int(rng.integers(1, 8))
            p = random_params(rng, d, scale=0.3)
            x = rng.normal(size=d)
            h = float(rng.normal())
            out, _ = mlp_forward(p, x, h, kind)
            assert out == pytest.approx(loop_forward(p, x, h, kind), abs=1e-12)

    def test_batch_matches_rows(self):
        rng = make_rng(3)
        p = init_mlp(5, rng)
        X = rng.normal(size=(7, 5))
        offs = rng.normal(size=7)
        batch, _ = mlp_forward(p, X, offs, "sigmoid")
        rows = [mlp_forward(p, X[i], offs[i], "sigmoid")[0] for i in range(7)]
        np.testing.assert_allclose(batch, rows, rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            mlp_forward(MlpParams.zeros(4), np.ones(3))

    def test_offset_length_mismatch(self):
        with pytest.raises(ShapeError):
            mlp_forward(MlpParams.zeros(2), np.ones((3, 2)), np.zeros(2))

    def test_unknown_output_kind(self):
        with pytest.raises(ValueError):
            mlp_forward(MlpParams.zeros(2), np.ones(2), 0.0, "softmax")


class TestBackward:
    def test_zero_upstream_gives_zero_gradient(self):
        rng = make_rng(0)
        p = init_mlp(4, rng)
        _, cache = mlp_forward(p, rng.normal(size=4), 0.3, "sigmoid")
        g, d_off = mlp_backward(p, cache, 0.0)
        assert not np.any(g.flatten())
        assert d_off == 0.0

    def test_one_hidden_unit_hand_derivation(self):
        # out = sigmoid(v * relu(w x + b) + c + h), x = (1, 2), active unit
        w, b, v, c, h = np.array([[0.5, -0.25]]), np.array([0.75]), np.array([[2.0]]), -0.5, 0.1
        x = np.array([1.0, 2.0])
        p = MlpParams(w, b, v, c)
        out, cache = mlp_forward(p, x, h, "sigmoid")
        a = 0.5 * 1.0 - 0.25 * 2.0 + 0.75  # 0.75
        z = 2.0 * a - 0.5 + 0.1  # 1.1
        s = 1.0 / (1.0 + math.exp(-z))
        assert out == pytest.approx(s, abs=1e-15)
        g, d_off = mlp_backward(p, cache, 1.0)
        ds = s * (1 - s)
        assert g.b2 == pytest.approx(ds, abs=1e-12)
        assert d_off == pytest.approx(ds, abs=1e-12)
        assert g.w2[0, 0] == pytest.approx(ds * a, abs=1e-12)
        assert g.b1[0] == pytest.approx(ds * 2.0, abs=1e-12)
        np.testing.assert_allclose(g.w1[0], ds * 2.0 * x, atol=1e-12)

    def test_inactive_unit_has_zero_first_layer_gradient(self):
        p = MlpParams(np.array([[1.0]]), np.array([-5.0]), np.array([[3.0]]), 0.0)
        _, cache = mlp_forward(p, np.array([1.0]), 0.0, "linear")
        g, _ = mlp_backward(p, cache, 1.0)
        assert g.w1[0, 0] == 0.0 and g.b1[0] == 0.0 and g.w2[0, 0] == 0.0 and g.b2 == 1.0

    def test_stale_cache(self):
        rng = make_rng(1)
        p = init_mlp(3, rng)
        _, cache = mlp_forward(p, np.ones(3))
        with pytest.raises(StaleCacheError):
            mlp_backward(p.copy(), cache, 1.0)

    def test_per_row_offset_gradient(self):
        rng = make_rng(5)
        p = init_mlp(3, rng)
        X = rng.normal(size=(4, 3))
        _, cache = mlp_forward(p, X, np.zeros(4), "sigmoid")
        g, d_off = mlp_backward(p, cache, np.ones(4))
        assert d_off.shape == (4,)
        assert g.b2 == pytest.approx(d_off.sum(), abs=1e-15)


def fd_check(p, X, y, w, kind, offset, step=1e-5):
    """Analytic gradient of the weighted batch loss vs central differences."""
    g, _ = weighted_batch_grad(p, X, y, w, kind, offset)
    flat = p.flatten()
    num = np.empty_like(flat)

    def loss(vec, off=offset):
        q = MlpParams.unflatten(vec, p.in_dim, p.hidden)
        return weighted_batch_grad(q, X, y, w, kind, off)[1]

    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        num[i] = (loss(flat + e) - loss(flat - e)) / (2 * step)
    ana = g.flatten()
    # offset path: d loss / d h equals d loss / d b2 for a shared scalar offset
    num_h = (loss(flat, offset + step) - loss(flat, offset - step)) / (2 * step)
    ana = np.append(ana, g.b2)
    num = np.append(num, num_h)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
    return float(np.max(np.abs(ana - num) / denom))


@pytest.mark.parametrize("kind", ["sigmoid", "linear"])
def test_finite_difference_gradients(kind):
    rng = make_rng(2024, 0 if kind == "sigmoid" else 1)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        hidden = int(rng.integers(1, 9))
        p = random_params(rng, d, hidden, scale=0.7)
        X = rng.normal(size=(3, d))
        y = (rng.random(3) < 0.5).astype(float) if kind == "sigmoid" else rng.normal(size=3)
        worst = max(worst, fd_check(p, X, y, rng.random(3) * 2, kind, float(rng.normal())))
    assert worst < 1e-4


class TestLosses:
    def test_bce_values(self):
        assert bce_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
        assert bce_loss(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-6)
        assert bce_loss(0.2, 0) == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_bce_clamps_extremes(self):
        assert math.isfinite(bce_loss(0.0, 1))
        assert bce_loss(0.0, 1) == pytest.approx(-math.log(1e-7))
        assert bce_loss(1.0, 0) == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_sigmoid_is_stable(self):
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(1000.0) == 1.0
        assert isinstance(sigmoid(0.0), float)
        np.testing.assert_allclose(sigmoid(np.array([-2.0, 2.0])).sum(), 1.0)

    def test_softplus(self):
        assert softplus(0.0) == pytest.approx(math.log(2))
        assert softplus(800.0) == pytest.approx(800.0)


class TestSgd:
    def test_zero_gradient_leaves_params(self):
        p = init_mlp(3, make_rng(0))
        q = sgd_step(p, MlpParams.zeros(3), 0.1)
        np.testing.assert_array_equal(q.flatten(), p.flatten())

    def test_unit_gradient(self):
        p = MlpParams.zeros(3)
        g = MlpParams.unflatten(np.ones(flat_size(3)), 3)
        q = sgd_step(p, g, 0.001)
        np.testing.assert_array_equal(q.flatten(), np.full(flat_size(3), -0.001))

    def test_two_steps_equal_one_summed_step(self):
        rng = make_rng(9)
        p = init_mlp(3, rng)
        g1 = MlpParams.unflatten(rng.normal(size=flat_size(3)), 3)
        g2 = MlpParams.unflatten(rng.normal(size=flat_size(3)), 3)
        two = sgd_step(sgd_step(p, g1, 0.01), g2, 0.01)
        one = sgd_step(p, MlpParams.unflatten(g1.flatten() + g2.flatten(), 3), 0.01)
        np.testing.assert_allclose(two.flatten(), one.flatten(), rtol=0, atol=1e-15)

    def test_non_finite_gradient_reports_index(self):
        g = MlpParams.zeros(2)
        g.b1[3] = np.nan
        with pytest.raises(NumericError) as info:
            sgd_step(MlpParams.zeros(2), g, 0.1)
        assert info.value.index == HIDDEN * 2 + 3

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_learning_rate_must_be_positive(self, lr):
        with pytest.raises(ValueError):
            sgd_step(MlpParams.zeros(2), MlpParams.zeros(2), lr)


@settings(max_examples=30, deadline=None)
@given(in_dim=st.integers(1, 6), hidden=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
def test_flatten_roundtrip(in_dim, hidden, seed):
    p = init_mlp(in_dim, make_rng(seed), hidden)
    flat = p.flatten()
    assert flat.size == p.size == flat_size(in_dim, hidden)
    q = MlpParams.unflatten(flat, in_dim, hidden)
    np.testing.assert_array_equal(q.flatten(), flat)
    np.testing.assert_array_equal(q.w1, p.w1)
    assert q.b2 == p.b2


def test_flat_order_is_w1_b1_w2_b2():
    p = MlpParams(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([5.0, 6.0]), np.array([[7.0, 8.0]]), 9.0)
    np.testing.assert_array_equal(p.flatten(), np.arange(1.0, 10.0))


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ShapeError):
        MlpParams.unflatten(np.zeros(5), 2, 3)


def test_training_is_deterministic():
    def script():
        rng = make_rng(42, 7)
        X = rng.normal(size=(40, 4))
        y = (X[:, 0] > 0).astype(float)
        p = init_mlp(4, make_rng(42, 8))
        p, _ = minibatch_sgd(p, X, y, None, epochs=3, batch_size=8, lr=0.05, rng=make_rng(42, 9),
                             output_kind="sigmoid")
        return p.flatten()

    np.testing.assert_array_equal(script(), script())


def test_rng_streams_are_keyed():
    a = make_rng(1, 2, 3).random(4)
    np.testing.assert_array_equal(a, make_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, make_rng(1, 2, 4).random(4))


def test_weighted_gradient_is_weight_scaled():
    rng = make_rng(8)
    p = init_mlp(3, rng)
    X = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    w = rng.random(5) * 3
    g_w, _ = weighted_batch_grad(p, X, y, w, "linear")
    total = np.zeros(p.size)
    for i in range(5):
        gi, _ = weighted_batch_grad(p, X[i : i + 1], y[i : i + 1], np.ones(1), "linear")
        total += w[i] * gi.flatten() / 5
    np.testing.assert_allclose(g_w.flatten(), total, rtol=0, atol=1e-12)
