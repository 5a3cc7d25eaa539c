"""Operator tests: trivial identities, independent oracles, gradient checks.

The finite-difference helper here is deliberately separate from
``asdkit.ops.gradient_check`` so each backward pass is verified by code
that shares nothing with the implementation under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdkit import ops
from asdkit.errors import ShapeError


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f w.r.t. every entry of x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6))


def conv2d_naive(x, w, b):
    """Direct 6-nested-loop reference for 3x3 same-padding convolution."""
    bs, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((bs, cout, h, wd), dtype=x.dtype)
    for n in range(bs):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(3):
                            for v in range(3):
                                acc += xp[n, c, i + u, j + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + b[o]
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        b = np.zeros(1)
        np.testing.assert_array_equal(ops.conv2d_forward(x, w, b), x)

    def test_zero_weights_bias(self):
        x = np.random.default_rng(1).normal(size=(1, 3, 4, 4))
        w = np.zeros((2, 3, 3, 3))
        b = np.array([1.5, -2.0])
        y = ops.conv2d_forward(x, w, b)
        assert np.all(y[:, 0] == 1.5) and np.all(y[:, 1] == -2.0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 4, 4))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        assert np.max(np.abs(ops.conv2d_forward(x, w, b) - conv2d_naive(x, w, b))) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_loop_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        bs, cin, cout = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h, w_ = rng.integers(2, 17), rng.integers(2, 17)
        x = rng.normal(size=(bs, cin, h, w_))
        w = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        assert np.max(np.abs(ops.conv2d_forward(x, w, b) - conv2d_naive(x, w, b))) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        dx, dw, db = ops.conv2d_backward(np.zeros((1, 3, 4, 4)), x, w)
        assert not dx.any() and not dw.any() and not db.any()

    def test_backward_identity_kernel(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        go = np.random.default_rng(4).normal(size=(1, 1, 4, 4))
        dx, _, _ = ops.conv2d_backward(go, np.zeros((1, 1, 4, 4)), w)
        np.testing.assert_allclose(dx, go, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        t = rng.normal(size=(2, 3, 4, 5))

        def loss():
            return ops.mse_loss(ops.conv2d_forward(x, w, b), t)[0]

        _, dpred = ops.mse_loss(ops.conv2d_forward(x, w, b), t)
        dx, dw, db = ops.conv2d_backward(dpred, x, w)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
        assert rel_err(dw, numeric_grad(loss, w)) < 1e-4
        assert rel_err(db, numeric_grad(loss, b)) < 1e-4


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    @staticmethod
    def _fresh(c):
        return (np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))

    def test_train_normalizes(self):
        rng = np.random.default_rng(0)
        x = rng.normal(loc=3.0, scale=2.0, size=(8, 3, 4, 4))
        gamma, beta, rm, rv = self._fresh(3)
        y, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True, eps=1e-12)
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
        assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1.0) < 1e-5)

    def test_affine_law(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 2, 3, 3))
        gamma, beta, rm, rv = self._fresh(2)
        xhat, _ = ops.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train=True)
        y, _ = ops.batchnorm_forward(
            x, np.full(2, 2.0), np.full(2, 3.0), rm, rv, train=True
        )
        np.testing.assert_allclose(y, 2.0 * xhat + 3.0, rtol=1e-12)

    def test_inference_near_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 2, 3, 3))
        gamma, beta, rm, rv = self._fresh(2)
        y, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=False, eps=1e-3)
        np.testing.assert_allclose(y, x / np.sqrt(1.0 + 1e-3), rtol=1e-12)

    def test_running_stats_update(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=5.0, size=(16, 1, 4, 4))
        gamma, beta, rm, rv = self._fresh(1)
        ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True, momentum=0.9)
        np.testing.assert_allclose(rm, 0.1 * x.mean(), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 * 1.0 + 0.1 * x.var(), rtol=1e-12)

    def test_single_element_rejected(self):
        gamma, beta, rm, rv = self._fresh(2)
        with pytest.raises(ShapeError):
            ops.batchnorm_forward(np.zeros((1, 2, 1, 1)), gamma, beta, rm, rv, train=True)

    def test_2d_input(self):
        rng = np.random.default_rng(4)
        x = rng.normal(loc=-1.0, size=(32, 5))
        gamma, beta, rm, rv = self._fresh(5)
        y, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True, eps=1e-12)
        assert np.all(np.abs(y.mean(axis=0)) < 1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 3, 2, 2))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        t = rng.normal(size=x.shape)

        def loss():
            rm, rv = np.zeros(3), np.ones(3)
            y, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
            return ops.mse_loss(y, t)[0]

        rm, rv = np.zeros(3), np.ones(3)
        y, cache = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
        _, dpred = ops.mse_loss(y, t)
        dx, dgamma, dbeta = ops.batchnorm_backward(dpred, cache)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
        assert rel_err(dgamma, numeric_grad(loss, gamma)) < 1e-4
        assert rel_err(dbeta, numeric_grad(loss, beta)) < 1e-4


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

class TestRelu:
    def test_examples(self):
        np.testing.assert_array_equal(
            ops.relu(np.array([-1.0, 0.0, 2.0])), np.array([0.0, 0.0, 2.0])
        )

    def test_positive_passthrough(self):
        x = np.abs(np.random.default_rng(0).normal(size=(4, 4))) + 0.1
        np.testing.assert_array_equal(ops.relu(x), x)
        go = np.random.default_rng(1).normal(size=(4, 4))
        np.testing.assert_array_equal(ops.relu_backward(go, x), go)

    def test_zero_subgradient(self):
        x = np.array([0.0, -2.0, 3.0])
        go = np.ones(3)
        np.testing.assert_array_equal(ops.relu_backward(go, x), [0.0, 0.0, 1.0])

    def test_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 7))
        x[np.abs(x) < 1e-3] = 0.5  # keep probes off the kink
        t = rng.normal(size=x.shape)

        def loss():
            return ops.mse_loss(ops.relu(x), t)[0]

        _, dpred = ops.mse_loss(ops.relu(x), t)
        dx = ops.relu_backward(dpred, x)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4


# ---------------------------------------------------------------------------
# maxpool / upsample
# ---------------------------------------------------------------------------

def maxpool_naive(x):
    """Per-window max by explicit enumeration."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // 2, w // 2), dtype=x.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[n, ch, i, j] = x[n, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


class TestPooling:
    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y, idx = ops.maxpool2x2(x)
        assert y[0, 0, 0, 0] == 4.0
        assert idx[0, 0, 0, 0] == 3  # bottom-right in scan order

    def test_constant_ties_go_first(self):
        x = np.ones((1, 1, 4, 4))
        y, idx = ops.maxpool2x2(x)
        assert np.all(y == 1.0) and np.all(idx == 0)
        g = ops.maxpool2x2_backward(np.ones((1, 1, 2, 2)), idx, x.shape)
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(g, expected)

    def test_matches_window_enumeration(self):
        x = np.random.default_rng(5).normal(size=(1, 1, 8, 8))
        y, _ = ops.maxpool2x2(x)
        np.testing.assert_array_equal(y, maxpool_naive(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            ops.maxpool2x2(np.zeros((1, 1, 3, 4)))

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 2, 4, 4))  # continuous values: ties measure zero
        t = rng.normal(size=(2, 2, 2, 2))

        def loss():
            return ops.mse_loss(ops.maxpool2x2(x)[0], t)[0]

        y, idx = ops.maxpool2x2(x)
        _, dpred = ops.mse_loss(y, t)
        dx = ops.maxpool2x2_backward(dpred, idx, x.shape)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4

    def test_upsample_example(self):
        x = np.array([[5.0]]).reshape(1, 1, 1, 1)
        np.testing.assert_array_equal(
            ops.upsample2x(x), np.full((1, 1, 2, 2), 5.0)
        )

    def test_upsample_then_pool_is_identity(self):
        x = np.abs(np.random.default_rng(7).normal(size=(2, 3, 4, 4)))
        y, _ = ops.maxpool2x2(ops.upsample2x(x))
        np.testing.assert_array_equal(y, x)

    def test_pool_then_upsample_identity_on_block_constant(self):
        base = np.random.default_rng(8).normal(size=(1, 2, 3, 3))
        x = ops.upsample2x(base)  # constant within each 2x2 block
        y, _ = ops.maxpool2x2(x)
        np.testing.assert_array_equal(ops.upsample2x(y), x)

    def test_upsample_backward_sums_four(self):
        g = ops.upsample2x_backward(np.ones((1, 1, 4, 4)))
        np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 4.0))

    def test_upsample_backward_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 2, 3, 3))
        t = rng.normal(size=(1, 2, 6, 6))

        def loss():
            return ops.mse_loss(ops.upsample2x(x), t)[0]

        _, dpred = ops.mse_loss(ops.upsample2x(x), t)
        dx = ops.upsample2x_backward(dpred)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

class TestDense:
    def test_identity_weights(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        y = ops.dense_forward(x, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(y, x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, 2.0, 3.0])
        y = ops.dense_forward(np.zeros((2, 5)), np.zeros((5, 3)), b)
        np.testing.assert_array_equal(y, np.tile(b, (2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.dense_forward(np.zeros((2, 5)), np.zeros((4, 3)), np.zeros(3))

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        t = rng.normal(size=(4, 3))

        def loss():
            return ops.mse_loss(ops.dense_forward(x, w, b), t)[0]

        _, dpred = ops.mse_loss(ops.dense_forward(x, w, b), t)
        dx, dw, db = ops.dense_backward(dpred, x, w)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
        assert rel_err(dw, numeric_grad(loss, w)) < 1e-4
        assert rel_err(db, numeric_grad(loss, b)) < 1e-4


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class TestLosses:
    def test_mse_zero_at_equality(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        assert ops.mse_loss(x, x.copy())[0] == 0.0

    def test_mse_constant_offset(self):
        x = np.zeros((2, 5))
        loss, _ = ops.mse_loss(x + 0.7, x)
        assert abs(loss - 0.49) < 1e-15

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_mse_gradient(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(4, 6))
        t = rng.normal(size=(4, 6))
        _, g = ops.mse_loss(p, t)
        assert rel_err(g, numeric_grad(lambda: ops.mse_loss(p, t)[0], p)) < 1e-6

    def test_cce_uniform_logits(self):
        loss, _ = ops.softmax_cce_loss(np.zeros((3, 4)), np.array([0, 1, 2]))
        assert abs(loss - np.log(4.0)) < 1e-12

    def test_cce_large_margin(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 50.0
        loss, _ = ops.softmax_cce_loss(logits, np.array([1]))
        assert loss < 1e-6

    def test_cce_out_of_range_label(self):
        with pytest.raises(ValueError):
            ops.softmax_cce_loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_cce_nonnegative_and_softmax_sums(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(scale=5.0, size=(10, 6))
        labels = rng.integers(0, 6, size=10)
        loss, _ = ops.softmax_cce_loss(logits, labels)
        assert loss >= 0.0
        assert np.all(np.abs(ops.softmax(logits).sum(axis=1) - 1.0) < 1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_cce_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        _, g = ops.softmax_cce_loss(logits, labels)
        num = numeric_grad(lambda: ops.softmax_cce_loss(logits, labels)[0], logits)
        assert rel_err(g, num) < 1e-5

    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_sum_to_one(self, k, seed):
        logits = np.random.default_rng(seed).normal(scale=20.0, size=(4, k))
        assert np.all(np.abs(ops.softmax(logits).sum(axis=1) - 1.0) < 1e-12)


# ---------------------------------------------------------------------------
# gradient_check itself
# ---------------------------------------------------------------------------

class TestGradientCheck:
    def test_linear_layer_near_exact(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 3))
        b = rng.normal(size=3)
        t = rng.normal(size=(4, 3))

        def loss_fn():
            return ops.mse_loss(ops.dense_forward(x, w, b), t)[0]

        def grad_fn():
            _, dpred = ops.mse_loss(ops.dense_forward(x, w, b), t)
            dx, dw, db = ops.dense_backward(dpred, x, w)
            return [dx, dw, db]

        err = ops.gradient_check(loss_fn, grad_fn, [x, w, b], rng=np.random.default_rng(1))
        assert err < 1e-7

    def test_tie_point_resampled(self):
        # constant input puts every pooling window on an exact tie
        state = {"x": np.ones((1, 1, 4, 4)), "resamples": 0}
        rng = np.random.default_rng(3)
        t = np.zeros((1, 1, 2, 2))

        def loss_fn():
            return ops.mse_loss(ops.maxpool2x2(state["x"])[0], t)[0]

        def grad_fn():
            y, idx = ops.maxpool2x2(state["x"])
            _, dpred = ops.mse_loss(y, t)
            return [ops.maxpool2x2_backward(dpred, idx, state["x"].shape)]

        def resample():
            state["resamples"] += 1
            state["x"][...] = rng.normal(size=state["x"].shape)

        err = ops.gradient_check(
            loss_fn, grad_fn, [state["x"]], rng=np.random.default_rng(4), resample=resample
        )
        assert state["resamples"] >= 1
        assert err < 1e-4
