import math

import numpy as np
import pytest

from usr import ops
from usr.autograd import Tensor
from usr.errors import DimensionError, ParameterError
from usr.nn import initialize
from usr.rng import DeterministicRng, StreamKey
from usr.vddc import WindowAttention

CASES = range(5)


def _rng(case: int) -> DeterministicRng:
    return DeterministicRng(StreamKey(99, case, 'ops'))


def _normal(rng, *shape):
    return rng.gaussian_array(int(np.prod(shape))).reshape(shape)


def conv_oracle(x, w, b, padding, stride):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for y in range(oh):
            for x0 in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += w[o, c, i, j] * xp[c, y * stride + i, x0 * stride + j]
                out[o, y, x0] = acc
    return out


def dynamic_conv_oracle(f, u):
    c, h, w = f.shape
    _, kh, kw = u.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros_like(f)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        yy, xx = y + i - ph, x + j - pw
                        if 0 <= yy < h and 0 <= xx < w:
                            acc += u[ch, i, j] * f[ch, yy, xx]
                out[ch, y, x] = acc
    return out


def msa_oracle(f, attn, window, heads):
    c, h, w = f.shape
    dh = c // heads
    out = np.zeros_like(f)

    def proj(layer, t):
        return t @ layer.weight.data.T + layer.bias.data

    for wy in range(0, h, window):
        for wx in range(0, w, window):
            tokens = f[:, wy:wy + window, wx:wx + window].reshape(c, -1).T
            q, k, v = proj(attn.q, tokens), proj(attn.k, tokens), proj(attn.v, tokens)
            mixed = np.zeros_like(tokens)
            for head in range(heads):
                sl = slice(head * dh, (head + 1) * dh)
                scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
                scores = np.exp(scores - scores.max(axis=1, keepdims=True))
                mixed[:, sl] = (scores / scores.sum(axis=1, keepdims=True)) @ v[:, sl]
            out[:, wy:wy + window, wx:wx + window] = proj(attn.proj, mixed).T.reshape(c, window, window)
    return out


class TestConv2d:

    @pytest.mark.parametrize('case', CASES)
    @pytest.mark.parametrize('padding,stride', [(1, 1), (0, 1), (1, 2)])
    def test_matches_loop(self, case, padding, stride):
        rng = _rng(case)
        x, w, b = _normal(rng, 3, 7, 6), _normal(rng, 2, 3, 3, 3), _normal(rng, 2)
        got = ops.conv2d(x, w, b, padding=padding, stride=stride).data
        np.testing.assert_allclose(got, conv_oracle(x, w, b, padding, stride), rtol=0, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))

    def test_even_kernel(self):
        with pytest.raises(DimensionError):
            ops.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 2, 2)))

    def test_bad_stride(self):
        with pytest.raises(ParameterError):
            ops.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 3, 3)), stride=0)


class TestDepthwiseDynamicConv:

    @pytest.mark.parametrize('case', CASES)
    def test_matches_loop(self, case):
        rng = _rng(case)
        f, u = _normal(rng, 3, 6, 5), _normal(rng, 3, 3, 3)
        np.testing.assert_allclose(ops.depthwise_dynamic_conv(f, u).data, dynamic_conv_oracle(f, u),
                                   rtol=0, atol=1e-10)

    def test_centre_tap_is_identity(self):
        f = _normal(_rng(0), 2, 4, 4)
        u = np.zeros((2, 3, 3))
        u[:, 1, 1] = 1.0
        np.testing.assert_array_equal(ops.depthwise_dynamic_conv(f, u).data, f)

    def test_kernel_channels_must_match(self):
        with pytest.raises(DimensionError):
            ops.depthwise_dynamic_conv(np.zeros((2, 4, 4)), np.zeros((3, 3, 3)))


class TestPixelShuffle:

    def test_layout(self):
        r = 2
        x = np.arange(2 * r * r * 3 * 2, dtype=np.float64).reshape(2 * r * r, 3, 2)
        out = ops.pixel_shuffle(x, r).data
        assert out.shape == (2, 6, 4)
        for c in range(2):
            for y in range(3):
                for x0 in range(2):
                    for i in range(r):
                        for j in range(r):
                            assert out[c, y * r + i, x0 * r + j] == x[c * r * r + i * r + j, y, x0]

    def test_unshuffle_inverts(self):
        x = _normal(_rng(1), 12, 3, 4)
        np.testing.assert_array_equal(ops.pixel_unshuffle(ops.pixel_shuffle(x, 2), 2).data, x)

    def test_indivisible_channels(self):
        with pytest.raises(DimensionError):
            ops.pixel_shuffle(np.zeros((6, 2, 2)), 2)


class TestLayerNorm:

    @pytest.mark.parametrize('case', CASES)
    def test_matches_formula(self, case):
        rng = _rng(case)
        x, gamma, beta = _normal(rng, 4, 6), _normal(rng, 6), _normal(rng, 6)
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-5) * gamma + beta
        np.testing.assert_allclose(ops.layer_norm(x, gamma, beta).data, expected, rtol=0, atol=1e-10)

    def test_channel_layer_norm_normalizes_each_pixel(self):
        f = _normal(_rng(2), 4, 3, 3)
        out = ops.channel_layer_norm(Tensor(f), np.ones(4), np.zeros(4)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)


class TestWindowMSA:

    @pytest.mark.parametrize('case', CASES)
    def test_matches_loop(self, case):
        attn = initialize(WindowAttention(4), case)
        f = _normal(_rng(case), 4, 8, 4)
        np.testing.assert_allclose(ops.window_msa(f, attn, 4, 2).data, msa_oracle(f, attn, 4, 2),
                                   rtol=0, atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        attn = initialize(WindowAttention(4), 3)
        _, weights = ops.window_msa(_normal(_rng(0), 4, 4, 4), attn, 2, 2, return_attention=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_window_must_divide(self):
        with pytest.raises(DimensionError):
            ops.window_msa(np.zeros((4, 6, 6)), initialize(WindowAttention(4), 0), 4, 2)

    def test_partition_round_trip(self):
        f = Tensor(_normal(_rng(4), 3, 8, 4))
        tokens = ops.window_partition(f, 4)
        assert tokens.shape == (2, 16, 3)
        np.testing.assert_array_equal(ops.window_reverse(tokens, 4, 8, 4).data, f.data)


class TestElementwise:

    def test_sigmoid_is_stable(self):
        out = ops.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)

    def test_gelu_reference_values(self):
        out = ops.activation('gelu', np.array([0.0, 1.0, -1.0])).data
        np.testing.assert_allclose(out, [0.0, 0.8411919906, -0.1588080094], atol=1e-7)

    def test_leaky_relu(self):
        np.testing.assert_array_equal(ops.activation('leaky_relu', np.array([-2.0, 3.0]), 0.1).data, [-0.2, 3.0])

    def test_unknown_activation(self):
        with pytest.raises(ParameterError):
            ops.activation('swish', np.zeros(1))

    def test_softmax_rows(self):
        out = ops.softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        np.testing.assert_allclose(out[1], 1.0 / 3.0)

    def test_linear(self):
        x, w, b = np.array([1.0, 2.0]), np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]]), np.array([0.5, 0.0, -1.0])
        np.testing.assert_array_equal(ops.linear(x, w, b).data, [1.5, 3.0, 3.0])

    def test_clamp_gradient_masks_outside(self):
        x = Tensor(np.array([-2.0, 0.5, 9.0]), requires_grad=True)
        ops.clamp(x, -1.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestLosses:

    def test_values(self):
        pred, target = np.array([1.0, 2.0]), np.array([0.0, 4.0])
        assert ops.reconstruction_loss('mse', pred, target).item() == 2.5
        assert ops.reconstruction_loss('l1', pred, target).item() == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.reconstruction_loss('mse', np.zeros(2), np.zeros(3))

    def test_unknown(self):
        with pytest.raises(ParameterError):
            ops.reconstruction_loss('huber', np.zeros(2), np.zeros(2))
