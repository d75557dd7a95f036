import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenebalance.nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    LayerParams,
    LeakyReLU,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    ShapeError,
    Sigmoid,
    Tanh,
    activation,
    adam,
    as_tensor,
    concat_flatten,
    conv2d,
    gradient_check,
    maxpool,
    optimizer_step,
    sgd,
    squared_loss,
    transposed_conv2d,
    weighted_sum_loss,
)
from scenebalance.nn.functional import conv_output_size, transposed_output_size

from oracles import naive_conv, naive_tconv


def params(w, b=None):
    w = np.asarray(w, dtype=np.float32)
    if b is None:
        b = np.zeros(w.shape[0] if w.ndim == 2 else w.shape[0], dtype=np.float32)
    return LayerParams(w, np.asarray(b, dtype=np.float32))


class TestConv2d:
    def test_sum_of_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3), np.float32), params(np.ones((1, 1, 3, 3))), 1, 0)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 5)).astype(np.float32)
        out = conv2d(x, params(np.ones((1, 1, 1, 1))), 1, 0)
        np.testing.assert_array_equal(out, x)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = conv2d(x, params(w, b), stride=2, padding=1)
        ref = naive_conv(x.astype(np.float64), w, b, 2, 1)
        assert out.shape == (1, 3, 3, 3)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    @pytest.mark.parametrize("size,k,s,p", [(8, 4, 2, 1), (7, 3, 1, 1), (9, 3, 2, 0), (6, 1, 1, 0)])
    def test_output_extent(self, size, k, s, p):
        x = np.zeros((1, 1, size, size), np.float32)
        out = conv2d(x, params(np.zeros((2, 1, k, k))), s, p)
        assert out.shape[2:] == (conv_output_size(size, k, s, p),) * 2 == ((size + 2 * p - k) // s + 1,) * 2

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.zeros((1, 2, 4, 4), np.float32), params(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ShapeError, match="kernel"):
            conv2d(np.zeros((1, 1, 2, 2), np.float32), params(np.zeros((1, 1, 3, 3))))


class TestTransposedConv2d:
    def test_single_tap_spread(self):
        out = transposed_conv2d(np.ones((1, 1, 1, 1), np.float32), params(np.ones((1, 1, 4, 4))), 2, 0)
        np.testing.assert_array_equal(out, np.ones((1, 1, 4, 4)))

    def test_doubling_block(self):
        out = transposed_conv2d(np.ones((1, 1, 4, 4), np.float32), params(np.ones((1, 1, 4, 4))), 2, 1)
        assert out.shape == (1, 1, 8, 8)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        out = transposed_conv2d(x, params(w, np.zeros(2)), 2, 1)
        np.testing.assert_allclose(out, naive_tconv(x.astype(np.float64), w, 2, 1), atol=1e-5)

    def test_adjoint_small(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 3, 3, 3))
        x = rng.standard_normal((1, 3, 7, 7))
        p = LayerParams(w, np.zeros(2))
        y = rng.standard_normal(conv2d(x, p, 2, 1).shape)
        lhs = np.sum(conv2d(x, p, 2, 1) * y)
        rhs = np.sum(x * transposed_conv2d(y, LayerParams(w, np.zeros(3)), 2, 1))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            transposed_conv2d(np.zeros((1, 2, 2, 2), np.float32), params(np.zeros((3, 1, 4, 4))))

    @given(
        k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2), out=st.integers(1, 5), c=st.integers(1, 3)
    )
    @settings(max_examples=40, deadline=None)
    def test_conv_then_transposed_restores_extent(self, k, s, p, out, c):
        # choose input so that (in + 2p - k) is divisible by s
        size = (out - 1) * s + k - 2 * p
        if size < 1:
            return
        x = np.zeros((1, c, size, size), np.float32)
        y = conv2d(x, params(np.zeros((2, c, k, k))), s, p)
        z = transposed_conv2d(y, params(np.zeros((2, c, k, k)), np.zeros(c)), s, p)
        assert z.shape == x.shape


class TestActivation:
    def test_sigmoid_zero(self):
        assert activation(np.array([0.0]), "sigmoid")[0] == 0.5

    def test_leaky(self):
        assert activation(np.array([-1.0]), "leaky-relu", 0.2)[0] == pytest.approx(-0.2)

    def test_sigmoid_scalar_oracle(self):
        xs = np.array([-2.0, -1.0, 1.0, 2.0])
        for x, y in zip(xs, activation(xs, "sigmoid")):
            assert abs(y - 1 / (1 + math.exp(-x))) <= 1e-9

    def test_sigmoid_range_extremes(self):
        y = activation(np.array([-30.0, 30.0, -1000.0, 1000.0]), "sigmoid")
        assert np.all(np.isfinite(y))
        assert y[0] > 0 and y[1] < 1

    def test_relu_tanh(self):
        x = np.array([-1.0, 0.5])
        np.testing.assert_array_equal(activation(x, "relu"), [0.0, 0.5])
        np.testing.assert_allclose(activation(x, "tanh"), np.tanh(x))

    def test_unknown(self):
        with pytest.raises(ValueError):
            activation(np.zeros(1), "gelu")


class TestMaxPool:
    def test_block_max(self):
        x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 2, 2)
        assert maxpool(x, 2).reshape(-1).tolist() == [4]

    @pytest.mark.parametrize("factor", [2, 4])
    def test_constant(self, factor):
        x = np.full((2, 3, 8, 8), 1.5, np.float32)
        out = maxpool(x, factor)
        assert out.shape == (2, 3, 8 // factor, 8 // factor)
        assert np.all(out == 1.5)

    def test_feature_alignment_shape(self):
        assert maxpool(np.zeros((1, 256, 16, 16), np.float32), 4).shape == (1, 256, 4, 4)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            maxpool(np.zeros((1, 1, 6, 6), np.float32), 4)


class TestConcatFlatten:
    def test_full_length(self):
        maps = [np.zeros((1, c, 4, 4), np.float32) for c in (1024, 512, 256)]
        assert concat_flatten(maps).shape == (1, 28672)

    def test_single_map(self):
        x = np.arange(12, dtype=np.float32).reshape(1, 3, 2, 2)
        np.testing.assert_array_equal(concat_flatten([x])[0], np.arange(12))

    def test_ordering(self):
        a = np.full((1, 1, 1, 1), 3.0, np.float32)
        b = np.full((1, 1, 1, 1), 7.0, np.float32)
        assert concat_flatten([a, b])[0].tolist() == [3.0, 7.0]

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_flatten([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 4, 4))])


class TestTensor:
    def test_validates(self):
        assert as_tensor([[1, 2]]).dtype == np.float32
        with pytest.raises(ShapeError):
            as_tensor(np.zeros((1, 1, 1, 1, 1)))
        with pytest.raises(ShapeError):
            as_tensor(np.zeros((0, 3)))

    def test_grad_shape_enforced(self):
        with pytest.raises(ShapeError):
            LayerParams(np.zeros((2, 2)), np.zeros(2), weight_grads=np.zeros(3))


class TestOptimizer:
    def test_sgd_plain(self):
        p = LayerParams(np.array([1.0], np.float32), np.array([0.0], np.float32))
        p.weight_grads[...] = 2.0
        state = optimizer_step([p], sgd(0.1))
        assert p.weights[0] == pytest.approx(0.8)
        assert state.step_count == 1
        assert p.weight_grads[0] == 2.0  # untouched

    def test_adam_first_step_magnitude(self):
        # scalar recurrence: m=(1-b1)g, v=(1-b2)g^2, m_hat=g, v_hat=g^2 -> step = lr*g/(|g|+eps)
        lr, eps = 1e-3, 1e-8
        expected = lr * 1.0 / (1.0 + eps)
        p = LayerParams(np.zeros((3, 2), np.float64), np.zeros(3, np.float64))
        p.weight_grads[...] = 1.0
        p.bias_grads[...] = 1.0
        optimizer_step([p], adam(lr, 0.9, 0.999))
        np.testing.assert_allclose(p.weights, -expected, rtol=1e-12)

    def test_adam_matches_scalar_recurrence(self):
        grads = [0.3, -1.2, 0.7, 0.05, 2.0]
        lr, b1, b2, eps = 0.01, 0.5, 0.999, 1e-8
        w, m, v = 0.4, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p = LayerParams(np.array([0.4]), np.array([0.0]))
        state = adam(lr, b1, b2)
        for g in grads:
            p.weight_grads[...] = g
            optimizer_step([p], state)
        assert p.weights[0] == pytest.approx(w, abs=1e-12)
        assert state.step_count == len(grads)

    def test_zero_grad_no_change(self):
        p = LayerParams(np.array([1.5, -2.0], np.float32), np.array([0.25], np.float32))
        before = (p.weights.copy(), p.biases.copy())
        optimizer_step([p], sgd(0.5))
        optimizer_step([p], adam(0.5))
        np.testing.assert_array_equal(p.weights, before[0])
        np.testing.assert_array_equal(p.biases, before[1])

    def test_momentum(self):
        p = LayerParams(np.array([0.0]), np.array([0.0]))
        state = sgd(1.0, momentum=0.5)
        p.weight_grads[...] = 1.0
        optimizer_step([p], state)
        optimizer_step([p], state)
        assert p.weights[0] == pytest.approx(-(1.0 + 1.5))

    def test_non_finite_rejected(self):
        p = LayerParams(np.array([0.0]), np.array([0.0]), name="disc.c8")
        p.bias_grads[...] = np.nan
        with pytest.raises(FloatingPointError, match="disc.c8.biases"):
            optimizer_step([p], sgd(0.1))

    def test_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            sgd(-1.0)
        with pytest.raises(ValueError):
            adam(0.1, beta1=1.0)


def _rng_input(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestGradientCheck:
    def test_linear_squared(self):
        net = Sequential([Linear(4, 3, rng=np.random.default_rng(0), std=0.5)])
        assert gradient_check(net, _rng_input((5, 4)), squared_loss(), epsilon=1e-3) <= 1e-4

    def test_zero_network(self):
        net = Sequential([Linear(3, 2, std=0.0)])
        assert gradient_check(net, np.zeros((2, 3)), squared_loss()) == 0.0

    def test_conv_leaky_sigmoid_stack(self):
        rng = np.random.default_rng(4)
        net = Sequential(
            [
                Conv2d(2, 3, 3, 1, 1, rng=rng, std=0.4),
                LeakyReLU(0.2),
                Conv2d(3, 2, 4, 2, 1, rng=rng, std=0.4),
                Sigmoid(),
            ]
        )
        err = gradient_check(net, _rng_input((2, 2, 6, 6), 5), squared_loss(), epsilon=1e-3)
        assert err <= 1e-3

    @pytest.mark.parametrize(
        "name,layer,shape",
        [
            ("conv2d", lambda r: Conv2d(2, 3, 4, 2, 1, rng=r, std=0.5), (2, 2, 6, 6)),
            ("conv_transpose2d", lambda r: ConvTranspose2d(3, 2, 4, 2, 1, rng=r, std=0.5), (2, 3, 3, 3)),
            ("linear", lambda r: Linear(5, 3, rng=r, std=0.5), (4, 5)),
            ("batchnorm2d", lambda r: BatchNorm2d(3), (4, 3, 3, 3)),
            ("leaky-relu", lambda r: LeakyReLU(0.2), (2, 3, 4, 4)),
            ("relu", lambda r: ReLU(), (2, 3, 4, 4)),
            ("tanh", lambda r: Tanh(), (2, 3, 4, 4)),
            ("sigmoid", lambda r: Sigmoid(), (2, 3, 4, 4)),
            ("maxpool", lambda r: MaxPool2d(2), (2, 2, 4, 4)),
            ("flatten", lambda r: Flatten(), (2, 2, 3, 3)),
        ],
    )
    def test_each_layer_kind(self, name, layer, shape):
        rng = np.random.default_rng(7)
        net = Sequential([layer(rng)])
        x = _rng_input(shape, 11)
        out_shape = net.forward(x.astype(np.float64)).shape
        probe = np.random.default_rng(3).standard_normal(out_shape)
        assert gradient_check(net, x, weighted_sum_loss(probe), epsilon=1e-3) <= 1e-3

    def test_batchnorm_eval_mode(self):
        bn = BatchNorm2d(2)
        bn.running_mean[...] = [0.3, -0.2]
        bn.running_var[...] = [1.5, 0.7]
        net = Sequential([bn]).eval()
        probe = np.random.default_rng(0).standard_normal((2, 2, 3, 3))
        assert gradient_check(net, _rng_input((2, 2, 3, 3)), weighted_sum_loss(probe)) <= 1e-3

    def test_three_layer_composite(self):
        rng = np.random.default_rng(9)
        net = Sequential(
            [
                ConvTranspose2d(2, 3, 4, 2, 1, rng=rng, std=0.3),
                BatchNorm2d(3),
                ReLU(),
                Conv2d(3, 2, 4, 2, 1, rng=rng, std=0.3),
                LeakyReLU(0.2),
                Flatten(),
                Linear(2 * 3 * 3, 1, rng=rng, std=0.3),
                Sigmoid(),
            ]
        )
        err = gradient_check(net, _rng_input((3, 2, 3, 3), 2), squared_loss(), epsilon=1e-4)
        assert err <= 1e-3

    def test_leaves_original_untouched(self):
        net = Sequential([Linear(3, 2, rng=np.random.default_rng(0), std=1.0)])
        before = net.parameters()[0].weights.copy()
        gradient_check(net, _rng_input((2, 3)), squared_loss())
        np.testing.assert_array_equal(net.parameters()[0].weights, before)
        assert net.parameters()[0].weights.dtype == np.float32

    def test_non_finite_loss_rejected(self):
        net = Sequential([Linear(2, 1)])
        with pytest.raises(FloatingPointError):
            gradient_check(net, np.ones((1, 2)), lambda out: (float("nan"), np.zeros_like(out)))

    def test_too_many_parameters(self):
        with pytest.raises(ValueError):
            gradient_check(Sequential([Linear(200, 60)]), np.zeros((1, 200)), squared_loss())


class TestInvariants:
    @given(
        n=st.integers(1, 2),
        cin=st.integers(1, 3),
        cout=st.integers(1, 3),
        k=st.integers(1, 4),
        s=st.integers(1, 3),
        p=st.integers(0, 2),
        out=st.integers(1, 4),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=30, deadline=None)
    def test_adjointness(self, n, cin, cout, k, s, p, out, seed):
        size = (out - 1) * s + k - 2 * p
        if size < 1 or p >= k:
            return
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((cout, cin, k, k))
        x = rng.standard_normal((n, cin, size, size))
        y = rng.standard_normal((n, cout, out, out))
        lhs = np.sum(conv2d(x, LayerParams(w, np.zeros(cout)), s, p) * y)
        rhs = np.sum(x * transposed_conv2d(y, LayerParams(w, np.zeros(cin)), s, p))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            net = Sequential([Conv2d(1, 4, 4, 2, 1, rng=rng), LeakyReLU(), Conv2d(4, 2, 4, 2, 1, rng=rng)])
            return net.forward(np.random.default_rng(1).standard_normal((2, 1, 8, 8)).astype(np.float32))

        assert run().tobytes() == run().tobytes()
