"""Forward values and exact-gradient checks for the operator set."""

import numpy as np
import pytest

from koopformer import tensor as T
from koopformer.errors import DimensionError

from gradcheck_util import finite_difference_check

RNG = np.random.default_rng(1234)


def leaf(shape, scale=1.0, seed=None):
    rng = RNG if seed is None else np.random.default_rng(seed)
    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


class TestForwardValues:
    def test_relu(self):
        out = T.relu(T.Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_leaky_relu(self):
        out = T.leaky_relu(T.Tensor(np.array([-1.0, 2.0])), alpha=0.1)
        np.testing.assert_allclose(out.data, [-0.1, 2.0])

    def test_layer_norm_constant_vector_is_zero(self):
        x = T.Tensor(np.full((2, 8), 3.7))
        gain = T.Tensor(np.ones(8))
        bias = T.Tensor(np.zeros(8))
        out = T.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, np.zeros((2, 8)), atol=1e-6)

    def test_softmax_equal_logits(self):
        out = T.softmax(T.Tensor(np.full((3, 5), 0.42)), axis=-1)
        np.testing.assert_allclose(out.data, np.full((3, 5), 0.2), rtol=1e-7)

    def test_gelu_reference_values(self):
        # 0.5 * x * (1 + erf(x / sqrt 2)) evaluated independently
        from math import erf, sqrt

        xs = np.array([-2.0, -0.5, 0.0, 0.3, 1.7])
        expect = np.array([0.5 * x * (1 + erf(x / sqrt(2))) for x in xs])
        np.testing.assert_allclose(T.gelu(T.Tensor(xs)).data, expect, rtol=1e-12)

    def test_matmul_shape_error_names_operands(self):
        with pytest.raises(DimensionError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))

    def test_dropout_eval_is_identity(self):
        x = T.Tensor(RNG.standard_normal((4, 4)))
        out = T.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_dropout_train_scales_kept_units(self):
        x = T.Tensor(np.ones((2000,)))
        out = T.dropout(x, 0.25, np.random.default_rng(0), training=True)
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 0.6 < (out.data != 0).mean() < 0.9

    def test_batch_norm_eval_uses_running_stats(self):
        x = T.Tensor(RNG.standard_normal((5, 3, 4)))
        gain = T.Tensor(np.ones(3))
        bias = T.Tensor(np.zeros(3))
        mean = np.array([1.0, 2.0, 3.0])
        var = np.array([4.0, 4.0, 4.0])
        out = T.batch_norm(x, gain, bias, mean, var, training=False)
        expect = (x.data - mean.reshape(1, 3, 1)) / np.sqrt(4.0 + 1e-5)
        np.testing.assert_allclose(out.data, expect, rtol=1e-6)

    def test_conv_wrap_equals_explicit_periodic_sum(self):
        # hand-rolled periodic cross-correlation oracle on a tiny grid
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 1, 4, 4))
        w = rng.standard_normal((9, 1))
        out = T.conv_nd(T.Tensor(x), T.Tensor(w), None, kernel=(3, 3), pad_mode="wrap")
        expect = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for di in range(3):
                    for dj in range(3):
                        acc += w[di * 3 + dj, 0] * x[0, 0, (i + di - 1) % 4, (j + dj - 1) % 4]
                expect[i, j] = acc
        np.testing.assert_allclose(out.data[0, 0], expect, rtol=1e-6)

    def test_conv_stride_output_shape(self):
        x = T.Tensor(np.zeros((2, 3, 16, 16, 16)))
        w = T.Tensor(np.zeros((3 * 27, 8)))
        out = T.conv_nd(x, w, None, kernel=(3, 3, 3), stride=2, pad_mode="wrap")
        assert out.shape == (2, 8, 8, 8, 8)

    def test_upsample_nearest_values(self):
        x = T.Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = T.upsample_nearest(x, 2)
        np.testing.assert_array_equal(
            out.data[0, 0],
            [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_banded_symmetric_structure(self):
        diag = T.Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        band = T.Tensor(np.array([5.0, 6.0, 7.0]))
        K = T.banded_symmetric(diag, [band]).data
        np.testing.assert_array_equal(K, [[1, 5, 0, 0], [5, 2, 6, 0],
                                          [0, 6, 3, 7], [0, 0, 7, 4]])


class TestGradients:
    """Every operator passes the central finite-difference oracle."""

    def check(self, fn, tensors, n_probes=60):
        def rebuild():
            for t in tensors:
                t.grad = None
            return fn()

        worst = finite_difference_check(rebuild, tensors, n_probes=n_probes)
        assert worst <= 1e-4, f"worst relative error {worst}"

    def test_elementwise_chain(self):
        x = leaf((4, 5))
        y = leaf((4, 5))
        self.check(lambda: ((x * y + x / (y * y + 3.0) - 0.5 * y) ** 2.0).sum(), [x, y])

    def test_activations(self):
        x = leaf((3, 7))
        self.check(lambda: (T.gelu(x) * T.tanh(x) + T.sigmoid(x) + T.relu(x)
                            + T.leaky_relu(x, 0.02)).sum(), [x])

    def test_softmax_layernorm(self):
        x, g, b = leaf((4, 6)), leaf(6, 0.5), leaf(6)
        self.check(lambda: (T.softmax(T.layer_norm(x, g, b)) ** 2.0).sum(), [x, g, b])

    def test_batch_norm_train_mode(self):
        x, g, b = leaf((6, 3, 5)), leaf(3), leaf(3)
        rm, rv = np.zeros(3), np.ones(3)
        self.check(lambda: (T.batch_norm(x, g, b, rm.copy(), rv.copy(), True) ** 2.0).mean(),
                   [x, g, b])

    def test_matmul_batched(self):
        a, b = leaf((2, 3, 4, 5)), leaf((5, 6))
        self.check(lambda: (T.matmul(a, b) ** 2.0).mean(), [a, b])

    def test_conv3d_both_pad_modes(self):
        for pad in ("wrap", "zeros"):
            x, w, b = leaf((2, 2, 4, 4, 4)), leaf((2 * 27, 3), 0.3), leaf(3)
            self.check(lambda: (T.conv_nd(x, w, b, (3, 3, 3), 2, pad) ** 2.0).sum(),
                       [x, w, b], n_probes=40)

    def test_conv2d(self):
        x, w = leaf((2, 3, 5, 5)), leaf((3 * 9, 4), 0.3)
        self.check(lambda: (T.conv_nd(x, w, None, (3, 3), 1, "zeros") ** 2.0).mean(), [x, w])

    def test_upsample_reductions_slicing(self):
        x = leaf((2, 3, 4, 4))
        self.check(lambda: (T.upsample_nearest(x, 2)[:, 1:, 2:, :] ** 2.0).mean()
                   + x.mean(axis=(0, 2)).sum() + x.sum(axis=1, keepdims=True).mean(), [x])

    def test_stack_concat_transpose_reshape(self):
        x = leaf((3, 4, 5))
        self.check(lambda: (T.stack([x[0], x[1]], axis=1) ** 2.0).sum()
                   + (T.concat([x, x], axis=2) ** 2.0).mean()
                   + (x.transpose(2, 0, 1).reshape(5, 12) ** 2.0).sum(), [x])

    def test_banded_symmetric(self):
        d, b1, b2, v = leaf(6), leaf(5), leaf(4), leaf(6)
        def fn():
            K = T.banded_symmetric(d, [b1, b2])
            return (T.matmul(K, v) ** 2.0).sum() + (K * K).sum()
        self.check(fn, [d, b1, b2, v])

    def test_mse(self):
        p = leaf((7, 3))
        target = RNG.standard_normal((7, 3))
        self.check(lambda: T.mse(p, target), [p])


class TestModes:
    def test_no_grad_builds_no_graph(self):
        x = leaf((3, 3))
        with T.no_grad():
            y = T.relu(x @ x)
        assert y._backward is None and not y.requires_grad

    def test_eval_mode_deterministic(self):
        x = T.Tensor(RNG.standard_normal((4, 8)))
        a = T.dropout(x, 0.5, np.random.default_rng(0), training=False)
        b = T.dropout(x, 0.5, np.random.default_rng(1), training=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_backward_requires_scalar(self):
        x = leaf((2, 2))
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_gradient_accumulation_over_reuse(self):
        x = leaf(4)
        loss = (x * x).sum() + (x * 3.0).sum()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, rtol=1e-6)
