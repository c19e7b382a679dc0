import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from battfault.numcore import (
    DimensionError,
    NonFiniteError,
    SeededRng,
    assert_finite,
    dropout,
    finite_diff_check,
    gelu,
    gelu_fwd,
    gelu_grad,
    layer_norm,
    layer_norm_bwd,
    layer_norm_fwd,
    matmul,
    softmax_bwd,
    softmax_rows,
)

finite_arrays = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=6),
    elements=st.floats(-50, 50),
)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(3).normal((4, 5))
        b = SeededRng(3).normal((4, 5))
        np.testing.assert_array_equal(a, b)

    def test_spawn_names_give_distinct_streams(self):
        root = SeededRng(3)
        a = root.spawn("alpha").normal(1000)
        b = root.spawn("beta").normal(1000)
        assert not np.array_equal(a, b)

    def test_spawn_is_order_independent(self):
        r1 = SeededRng(3)
        first = r1.spawn("x").normal(8)
        r2 = SeededRng(3)
        r2.spawn("unrelated").normal(8)
        again = r2.spawn("x").normal(8)
        np.testing.assert_array_equal(first, again)

    def test_multilevel_spawn(self):
        a = SeededRng(3).spawn("a").spawn("b", 2).uniform(16)
        b = SeededRng(3).spawn("a").spawn("b", 2).uniform(16)
        np.testing.assert_array_equal(a, b)


class TestBasics:
    def test_assert_finite_raises(self):
        with pytest.raises(NonFiniteError, match="logits"):
            assert_finite(np.array([1.0, np.nan]), "logits")

    def test_matmul_checks_rank(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3, 4)), np.zeros((4, 5)))

    def test_matmul_checks_inner_dim(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((4, 5)))


class TestLayerNorm:
    def test_unit_stats(self):
        x = SeededRng(0).normal((5, 16)) * 3 + 2
        y = layer_norm(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-6)

    @given(finite_arrays)
    @settings(max_examples=30, deadline=None)
    def test_shift_invariant(self, x):
        H = x.shape[-1]
        g, b = np.ones(H), np.zeros(H)
        shifted = layer_norm(x + 17.0, g, b)
        np.testing.assert_allclose(shifted, layer_norm(x, g, b), atol=1e-6)

    def test_backward_matches_finite_differences(self):
        rng = SeededRng(1)
        x = rng.spawn("x").normal((3, 8))
        g = rng.spawn("g").normal(8) + 1.0
        b = rng.spawn("b").normal(8)
        dy = rng.spawn("dy").normal((3, 8))

        y, cache = layer_norm_fwd(x, g, b)
        dx, dg, db = layer_norm_bwd(dy, cache)

        h = 1e-6
        for arr, grad in ((x, dx), (g, dg), (b, db)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + h
                up = float((layer_norm_fwd(x, g, b)[0] * dy).sum())
                arr[i] = orig - h
                dn = float((layer_norm_fwd(x, g, b)[0] * dy).sum())
                arr[i] = orig
                np.testing.assert_allclose(grad[i], (up - dn) / (2 * h), atol=1e-4)


class TestSoftmax:
    @given(finite_arrays)
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, x):
        p = softmax_rows(x)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p >= 0).all()

    def test_shift_invariance(self):
        x = SeededRng(2).normal((4, 6))
        np.testing.assert_allclose(softmax_rows(x), softmax_rows(x + 100.0), atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = SeededRng(4)
        x = rng.spawn("x").normal((2, 5))
        dp = rng.spawn("dp").normal((2, 5))
        p = softmax_rows(x)
        dx = softmax_bwd(dp, p)
        h = 1e-6
        num = np.empty_like(x)
        for i in np.ndindex(x.shape):
            orig = x[i]
            x[i] = orig + h
            up = float((softmax_rows(x) * dp).sum())
            x[i] = orig - h
            dn = float((softmax_rows(x) * dp).sum())
            x[i] = orig
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(dx, num, atol=1e-6)


class TestGelu:
    def test_known_values(self):
        np.testing.assert_allclose(gelu(np.array(0.0)), 0.0, atol=1e-15)
        # tanh-form GELU at x=1 (BERT convention)
        np.testing.assert_allclose(gelu(np.array(1.0)), 0.841192, atol=1e-5)

    def test_fwd_returns_reusable_tanh_term(self):
        x = SeededRng(5).normal(64)
        y, t = gelu_fwd(x)
        np.testing.assert_array_equal(y, gelu(x))
        np.testing.assert_array_equal(gelu_grad(x, t), gelu_grad(x))

    def test_grad_matches_finite_differences(self):
        x = np.linspace(-4, 4, 101)
        h = 1e-6
        num = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(x), num, atol=1e-8)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = SeededRng(6).normal((4, 4))
        np.testing.assert_array_equal(dropout(x, 0.5, train_mode=False), x)

    def test_inverted_scaling_preserves_mean(self):
        x = np.ones((200, 200))
        y = dropout(x, 0.3, train_mode=True, rng=SeededRng(7))
        kept = y[y != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.7, atol=1e-12)
        np.testing.assert_allclose(y.mean(), 1.0, atol=0.01)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, train_mode=True, rng=SeededRng(0))


class TestFiniteDiffCheck:
    def test_quadratic_passes(self):
        # loss = sum(w^2) + sum(v^2); analytic gradient 2w, 2v
        params = {"w": np.array([1.0, -2.0, 3.0]), "v": np.array([[0.5, 4.0]])}

        def loss(p):
            return float(sum((arr ** 2).sum() for arr in p.values()))

        grads = {k: 2 * v for k, v in params.items()}
        report = finite_diff_check(loss, params, grads, step=1e-5, tol=1e-6)
        assert report.ok
        assert report.failed == []

    def test_wrong_gradient_fails(self):
        params = {"w": np.array([1.0, 2.0])}

        def loss(p):
            return float((p["w"] ** 2).sum())

        report = finite_diff_check(loss, params, {"w": 3 * params["w"]},
                                   step=1e-5, tol=1e-6)
        assert not report.ok
        assert "w" in report.failed
