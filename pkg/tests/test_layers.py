import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdseg.errors import ShapeError
from mcdseg.layers import (BatchNormLayer, ConvLayer, DropoutLayer, batchnorm, conv2d, conv2d_reference,
                           dropout, max_pool, upsample_nearest)
from mcdseg.tensor import Tensor, backward, grad_check, leaky_relu, mul, relu, sigmoid, tsum


def make_conv(weight, bias=None, stride=1, padding=0):
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return ConvLayer(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True), stride, padding)


def weighted_sum(out, rng):
    # a fixed random weighting keeps normalization gradients from cancelling
    return tsum(mul(out, Tensor(rng.normal(size=out.shape))))


class TestConv:
    def test_scalar_kernel(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), make_conv([[[[2.0]]]]))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_diagonal_kernel(self):
        out = conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), make_conv([[[[1.0, 0.0], [0.0, 1.0]]]]))
        np.testing.assert_array_equal(out.data, [[[5.0]]])

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 6)))
        out = conv2d(x, make_conv(np.zeros((3, 2, 3, 3)), padding=1))
        np.testing.assert_array_equal(out.data, np.zeros((3, 6, 6)))

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_integer_inputs_match_reference_exactly(self, seed, stride, padding):
        # integer-valued doubles make every partial sum exact, so any summation order agrees
        rng = np.random.default_rng(seed)
        x = rng.integers(-9, 10, size=(2, 5, 5)).astype(np.float64)
        w = rng.integers(-9, 10, size=(3, 2, 3, 3)).astype(np.float64)
        b = rng.integers(-9, 10, size=3).astype(np.float64)
        out = conv2d(Tensor(x), make_conv(w, b, stride, padding))
        np.testing.assert_array_equal(out.data, conv2d_reference(x, w, b, stride, padding))

    @pytest.mark.parametrize("seed", range(10))
    def test_float_inputs_match_reference(self, seed):
        rng = np.random.default_rng(100 + seed)
        x, w, b = rng.normal(size=(3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = conv2d(Tensor(x), make_conv(w, b, 1, 1))
        np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, 1, 1), rtol=0, atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(3)
        layer = ConvLayer.create(2, 3, rng=rng)
        x = rng.normal(size=(4, 2, 8, 8))
        batched = conv2d(Tensor(x), layer).data
        for i in range(4):
            np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), layer).data, atol=1e-13)

    def test_same_padding_keeps_extent(self):
        layer = ConvLayer.create(3, 5, 3, rng=np.random.default_rng(0))
        assert conv2d(Tensor(np.zeros((1, 3, 16, 16))), layer).shape == (1, 5, 16, 16)
        assert layer.output_extent(16, 16) == (16, 16)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((2, 4, 4))), make_conv(np.ones((1, 3, 3, 3))))

    def test_he_init_scale(self):
        layer = ConvLayer.create(64, 64, 3, rng=np.random.default_rng(0))
        assert layer.weight.data.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.02)
        np.testing.assert_array_equal(layer.bias.data, 0.0)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("cin,cout,stride", [(2, 3, 1), (4, 2, 1), (2, 2, 2)])
    def test_grad_check(self, seed, cin, cout, stride):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, cin, 6, 6)), requires_grad=True)
        layer = ConvLayer.create(cin, cout, rng=rng, stride=stride)
        layer.bias.data[:] = rng.normal(size=cout)
        weights = Tensor(rng.normal(size=(2, cout) + layer.output_extent(6, 6)))
        err = grad_check(lambda: ([x, layer.weight, layer.bias],
                                  lambda: tsum(mul(conv2d(x, layer), weights))))
        assert err < 1e-4

    def test_single_conv_plus_sum(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
        layer = ConvLayer.create(1, 2, rng=rng)
        assert grad_check(lambda: ([x, layer.weight, layer.bias], lambda: tsum(conv2d(x, layer)))) < 1e-4


def brute_pool(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    arg = np.empty((c, h // 2, w // 2, 2), dtype=int)
    for ch in range(c):
        for r in range(h // 2):
            for q in range(w // 2):
                best = None
                for i in range(2):
                    for j in range(2):
                        v = x[ch, 2 * r + i, 2 * q + j]
                        if best is None or v > best:
                            best, arg[ch, r, q] = v, (2 * r + i, 2 * q + j)
                out[ch, r, q] = best
    return out, arg


class TestPool:
    def test_window_max(self):
        np.testing.assert_array_equal(max_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data, [[[4.0]]])

    def test_constant_ties_go_to_first(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
        out = max_pool(x)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
        backward(tsum(out))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_scan(self, seed):
        x = np.random.default_rng(seed).normal(size=(3, 4, 4))
        t = Tensor(x, requires_grad=True)
        out = max_pool(t)
        ref, arg = brute_pool(x)
        np.testing.assert_array_equal(out.data, ref)
        backward(tsum(out))
        expected = np.zeros_like(x)
        for ch, r, q in np.ndindex(ref.shape):
            expected[ch, arg[ch, r, q, 0], arg[ch, r, q, 1]] = 1.0
        np.testing.assert_array_equal(t.grad, expected)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            max_pool(Tensor(np.zeros((1, 1, 3, 4))))

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 2, 4, 4)), requires_grad=True)
        w = Tensor(np.random.default_rng(seed + 50).normal(size=(2, 2, 2, 2)))
        assert grad_check(lambda: ([x], lambda: tsum(mul(max_pool(x), w)))) < 1e-4


class TestUpsample:
    def test_single_pixel(self):
        np.testing.assert_array_equal(upsample_nearest(Tensor([[[1.0]]])).data, [[[1, 1], [1, 1]]])

    def test_blocks(self):
        out = upsample_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data
        np.testing.assert_array_equal(out[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 2, 6, 6)))
        assert grad_check(lambda: ([x], lambda: tsum(mul(upsample_nearest(x), w)))) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
    def test_pool_then_upsample_preserves_shape(self, c, h2, w2):
        x = Tensor(np.zeros((c, 2 * h2, 2 * w2)))
        assert upsample_nearest(max_pool(x)).shape == x.shape


def bn_oracle(x, gamma, beta, eps):
    out = np.empty_like(x)
    for ch in range(x.shape[1]):
        vals = x[:, ch].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, ch] = (x[:, ch] - mu) / np.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


class TestBatchNorm:
    def test_already_normalized(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
        out = batchnorm(Tensor(x), BatchNormLayer.create(1), "train")
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_constant_channel(self):
        layer = BatchNormLayer.create(2)
        layer.beta.data[:] = [0.3, -0.7]
        out = batchnorm(Tensor(np.full((2, 2, 3, 3), 5.0)), layer, "train")
        np.testing.assert_array_equal(out.data[:, 0], 0.3)
        np.testing.assert_array_equal(out.data[:, 1], -0.7)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_statistics_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
        layer = BatchNormLayer.create(3)
        layer.gamma.data[:] = rng.normal(size=3)
        layer.beta.data[:] = rng.normal(size=3)
        out = batchnorm(Tensor(x), layer, "train")
        np.testing.assert_allclose(out.data, bn_oracle(x, layer.gamma.data, layer.beta.data, 1e-5),
                                   rtol=1e-12, atol=1e-12)

    def test_running_statistics_update(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 1, 3, 3))
        layer = BatchNormLayer.create(1)
        batchnorm(Tensor(x), layer, "train")
        np.testing.assert_allclose(layer.running_mean, 0.1 * x.mean())
        np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * x.var(ddof=1))

    @pytest.mark.parametrize("mode", ["inference", "mc_active"])
    def test_frozen_modes_use_running_stats(self, mode):
        layer = BatchNormLayer.create(1)
        layer.running_mean[:] = 2.0
        layer.running_var[:] = 4.0 - 1e-5
        out = batchnorm(Tensor(np.full((1, 1, 2, 2), 6.0)), layer, mode)
        np.testing.assert_allclose(out.data, 2.0)
        np.testing.assert_array_equal(layer.running_mean, 2.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            batchnorm(Tensor(np.zeros((1, 1, 2, 2))), BatchNormLayer.create(1), "eval")

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("mode", ["train", "inference"])
    def test_grad_check(self, seed, mode):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        layer = BatchNormLayer.create(2)
        layer.gamma.data[:] = rng.normal(size=2)
        layer.beta.data[:] = rng.normal(size=2)
        layer.running_var[:] = rng.uniform(0.5, 2.0, size=2)
        w = Tensor(rng.normal(size=x.shape))
        err = grad_check(lambda: ([x, layer.gamma, layer.beta],
                                  lambda: tsum(mul(batchnorm(x, layer, mode), w))))
        assert err < 1e-4


class TestDropout:
    def test_zero_rate_identity(self):
        x = Tensor(np.arange(1.0, 7.0))
        for mode in ("train", "inference", "mc_active"):
            assert dropout(x, DropoutLayer(0.0), np.random.default_rng(0), mode) is x

    def test_inference_identity(self):
        x = Tensor(np.arange(1.0, 7.0))
        assert dropout(x, DropoutLayer(0.5, "inference")).data is x.data

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            DropoutLayer(1.0)
        with pytest.raises(ValueError):
            DropoutLayer(-0.1)

    def test_expectation_half(self):
        out = dropout(Tensor(np.ones(100_000)), DropoutLayer(0.5), np.random.default_rng(0), "mc_active")
        assert abs(out.data.mean() - 1.0) <= 0.01
        assert set(np.unique(out.data)) == {0.0, 2.0}

    @pytest.mark.parametrize("p", [0.1, 0.2, 0.5])
    def test_expectation_within_one_percent(self, p):
        out = dropout(Tensor(np.ones(100_000)), DropoutLayer(p), np.random.default_rng(42), "train")
        assert abs(out.data.mean() - 1.0) <= 0.01

    def test_seeded_stream_reproducible(self):
        layer = DropoutLayer(0.3)
        a = dropout(Tensor(np.ones(50)), layer, np.random.default_rng(5), "train").data
        b = dropout(Tensor(np.ones(50)), layer, np.random.default_rng(5), "train").data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check_zero_rate(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 3)), requires_grad=True)
        layer = DropoutLayer(0.0)
        assert grad_check(lambda: ([x], lambda: tsum(sigmoid(dropout(x, layer, None, "train"))))) < 1e-4

    def test_active_gradient_is_mask(self):
        x = Tensor(np.ones(20), requires_grad=True)
        out = dropout(x, DropoutLayer(0.5), np.random.default_rng(1), "train")
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad, out.data)


@pytest.mark.parametrize("seed", range(10))
def test_activation_grad_checks(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.01, requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    for act in (relu, lambda t: leaky_relu(t, 0.1), sigmoid):
        assert grad_check(lambda: ([x], lambda: tsum(mul(act(x), w)))) < 1e-4
