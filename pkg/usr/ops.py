"""
Differentiable operations

Primitive ``Function`` classes first, then the functional surface the
networks are written against (``conv2d``, ``window_msa``, ``layer_norm`` ...).
Images and feature maps are single samples laid out C x H x W; batches are
formed by the caller.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from usr.autograd import Function, Tensor, as_tensor, unbroadcast
from usr.errors import DimensionError, ParameterError

LAYER_NORM_EPS = 1e-5
GELU_COEF = math.sqrt(2.0 / math.pi)
ACTIVATIONS = ('relu', 'leaky_relu', 'sigmoid', 'gelu')
LOSSES = ('mse', 'l1')


# -- elementwise -------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Abs(Function):
    """
    |x| with subgradient 0 at 0
    """

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Clamp(Function):
    def forward(self, x, low=None, high=None):
        self.mask = np.ones_like(x)
        if low is not None:
            self.mask = self.mask * (x >= low)
        if high is not None:
            self.mask = self.mask * (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class ReLU(Function):
    """
    max(x, 0) with subgradient 0 at 0
    """

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    def forward(self, x, slope=0.1):
        self.scale = np.where(x > 0, 1.0, slope)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class GELU(Function):
    """
    tanh approximation of the gaussian error linear unit
    """

    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_COEF * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * GELU_COEF * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


# -- reductions and shape ----------------------------------------------------------


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = sorted(a % len(self.shape) for a in axes)
            for a in axes:
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            for a in sorted(a % len(self.shape) for a in axes):
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):
    def forward(self, x, axes=()):
        self.inverse = np.argsort(axes)
        return x.transpose(axes)

    def backward(self, grad):
        return (grad.transpose(self.inverse),)


class Index(Function):
    def forward(self, x, index=None):
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MatMul(Function):
    """
    Batched matrix product with numpy broadcasting over leading axes
    """

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f'matmul needs at least 2-D operands, got {a.shape} and {b.shape}')
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


# -- image operations --------------------------------------------------------------


class Conv2d(Function):
    """
    Cross-correlation of one C_in x H x W map with C_out x C_in x k x k weights, zero padding
    """

    def forward(self, x, weight, bias, padding=0, stride=1):
        c_in, h, w = x.shape
        c_out, _, k, _ = weight.shape
        self.x_shape, self.weight, self.padding, self.stride = x.shape, weight, padding, stride
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
        self.padded_shape = xp.shape
        windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        self.out_hw = windows.shape[1:3]
        # (H'W', C_in k k)
        self.cols = windows.transpose(1, 2, 0, 3, 4).reshape(-1, c_in * k * k)
        out = self.cols @ weight.reshape(c_out, -1).T
        return out.T.reshape(c_out, *self.out_hw) + bias[:, None, None]

    def backward(self, grad):
        c_out, c_in, k, _ = self.weight.shape
        oh, ow = self.out_hw
        s, p = self.stride, self.padding
        g2 = grad.reshape(c_out, -1)
        gw = (g2 @ self.cols).reshape(self.weight.shape)
        gb = grad.sum(axis=(1, 2))
        gcols = (g2.T @ self.weight.reshape(c_out, -1)).reshape(oh, ow, c_in, k, k)
        gxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * oh:s, j:j + s * ow:s] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        _, h, w = self.x_shape
        return gxp[:, p:p + h, p:p + w], gw, gb


class DepthwiseDynamicConv(Function):
    """
    Per-channel correlation of F (C x H x W) with data-dependent kernels u (C x h x w)
    """

    def forward(self, f, u):
        _, h, w = u.shape
        self.ph, self.pw = (h - 1) // 2, (w - 1) // 2
        self.f_shape, self.u = f.shape, u
        fp = np.pad(f, ((0, 0), (self.ph, self.ph), (self.pw, self.pw)))
        self.padded_shape = fp.shape
        self.windows = sliding_window_view(fp, (h, w), axis=(1, 2))
        return np.einsum('cyxij,cij->cyx', self.windows, u)

    def backward(self, grad):
        _, h, w = self.u.shape
        _, height, width = self.f_shape
        gu = np.einsum('cyxij,cyx->cij', self.windows, grad)
        gfp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(h):
            for j in range(w):
                gfp[:, i:i + height, j:j + width] += grad * self.u[:, i, j][:, None, None]
        return gfp[:, self.ph:self.ph + height, self.pw:self.pw + width], gu


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    c //= r * r
    return x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    h //= r
    w //= r
    return x.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)


class PixelShuffle(Function):
    def forward(self, x, r=1):
        self.r = r
        return _shuffle(x, r)

    def backward(self, grad):
        return (_unshuffle(grad, self.r),)


class PixelUnshuffle(Function):
    def forward(self, x, r=1):
        self.r = r
        return _unshuffle(x, r)

    def backward(self, grad):
        return (_shuffle(grad, self.r),)


class LayerNorm(Function):
    """
    Normalization over the last axis followed by the affine gamma / beta
    """

    def forward(self, x, gamma, beta, eps=LAYER_NORM_EPS):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        d = self.gamma.shape[-1]
        gxhat = grad * self.gamma
        ggamma = (grad * self.xhat).reshape(-1, d).sum(axis=0)
        gbeta = grad.reshape(-1, d).sum(axis=0)
        gx = self.inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - self.xhat * (gxhat * self.xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta


# -- functional surface ------------------------------------------------------------


def _check_map(name: str, t: Tensor):
    if t.ndim != 3:
        raise DimensionError(f'{name} expects a C x H x W tensor, got shape {t.shape}')


def conv2d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    _check_map('conv2d', x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f'conv2d weight must be C_out x C_in x k x k, got {weight.shape}')
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise DimensionError(f'conv2d kernel size must be odd, got {k}')
    if x.shape[0] != c_in:
        raise DimensionError(f'conv2d input has {x.shape[0]} channels, weight expects {c_in}')
    if padding < 0 or stride < 1:
        raise ParameterError(f'conv2d needs padding >= 0 and stride >= 1, got {padding}, {stride}')
    if x.shape[1] + 2 * padding < k or x.shape[2] + 2 * padding < k:
        raise DimensionError(f'conv2d kernel {k} larger than padded input {x.shape}')
    bias = as_tensor(np.zeros(c_out) if bias is None else bias)
    if bias.shape != (c_out,):
        raise DimensionError(f'conv2d bias must have shape ({c_out},), got {bias.shape}')
    return Conv2d.apply(x, weight, bias, padding=padding, stride=stride)


def depthwise_dynamic_conv(f, u) -> Tensor:
    f, u = as_tensor(f), as_tensor(u)
    _check_map('depthwise_dynamic_conv', f)
    if u.ndim != 3:
        raise DimensionError(f'dynamic kernel must be C x h x w, got {u.shape}')
    if u.shape[0] != f.shape[0]:
        raise DimensionError(f'dynamic kernel has {u.shape[0]} channels, features have {f.shape[0]}')
    if u.shape[1] % 2 == 0 or u.shape[2] % 2 == 0:
        raise DimensionError(f'dynamic kernel size must be odd, got {u.shape[1:]}')
    return DepthwiseDynamicConv.apply(f, u)


def pixel_shuffle(f, r: int) -> Tensor:
    f = as_tensor(f)
    _check_map('pixel_shuffle', f)
    if r < 1 or f.shape[0] % (r * r):
        raise DimensionError(f'pixel_shuffle: {f.shape[0]} channels not divisible by r^2 = {r * r}')
    return PixelShuffle.apply(f, r=r)


def pixel_unshuffle(f, r: int) -> Tensor:
    f = as_tensor(f)
    _check_map('pixel_unshuffle', f)
    if r < 1 or f.shape[1] % r or f.shape[2] % r:
        raise DimensionError(f'pixel_unshuffle: spatial size {f.shape[1:]} not divisible by {r}')
    return PixelUnshuffle.apply(f, r=r)


def linear(x, weight, bias=None) -> Tensor:
    """
    y = x W^T + b over the last axis of x
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f'linear: input width {x.shape[-1]} does not match weight {weight.shape}')
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    y = x @ weight.permute(1, 0)
    if bias is not None:
        y = y + bias
    return y.reshape(-1) if squeeze else y


def concat(tensors, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def clamp(x, low: float = None, high: float = None) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def activation(kind: str, x, slope: float = 0.1) -> Tensor:
    if kind == 'relu':
        return ReLU.apply(x)
    if kind == 'leaky_relu':
        if not 0 < slope < 1:
            raise ParameterError(f'leaky_relu slope must lie in (0, 1), got {slope}')
        return LeakyReLU.apply(x, slope=slope)
    if kind == 'sigmoid':
        return Sigmoid.apply(x)
    if kind == 'gelu':
        return GELU.apply(x)
    raise ParameterError(f'unknown activation "{kind}", expected one of {ACTIVATIONS}')


def global_avg_pool(f) -> Tensor:
    f = as_tensor(f)
    _check_map('global_avg_pool', f)
    return f.mean(axis=(1, 2))


def layer_norm(x, gamma, beta) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f'layer_norm: gamma/beta must have shape ({x.shape[-1]},)')
    return LayerNorm.apply(x, gamma, beta)


def channel_layer_norm(f, gamma, beta) -> Tensor:
    """
    layer_norm over the channels of a C x H x W map
    """
    return layer_norm(f.permute(1, 2, 0), gamma, beta).permute(2, 0, 1)


def window_partition(f: Tensor, window: int) -> Tensor:
    """
    C x H x W -> (nH nW) x (window^2) x C tokens
    """
    c, h, w = f.shape
    nh, nw = h // window, w // window
    return f.reshape(c, nh, window, nw, window).permute(1, 3, 2, 4, 0).reshape(nh * nw, window * window, c)


def window_reverse(tokens: Tensor, window: int, h: int, w: int) -> Tensor:
    c = tokens.shape[-1]
    nh, nw = h // window, w // window
    return tokens.reshape(nh, nw, window, window, c).permute(4, 0, 2, 1, 3).reshape(c, h, w)


def window_msa(f, params, window: int, heads: int, return_attention: bool = False):
    """
    Multi-head self-attention inside non-overlapping window x window patches.

    ``params`` exposes ``q``, ``k``, ``v`` and ``proj`` projections, each with
    ``weight`` (C x C) and ``bias`` (C) tensors.
    """
    f = as_tensor(f)
    _check_map('window_msa', f)
    c, h, w = f.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f'window_msa: {h}x{w} not divisible by window {window}')
    if heads < 1 or c % heads:
        raise DimensionError(f'window_msa: {c} channels not divisible by {heads} heads')
    dh = c // heads
    tokens = window_partition(f, window)
    n_windows, n = tokens.shape[0], tokens.shape[1]

    def split(t):
        return t.reshape(n_windows, n, heads, dh).permute(0, 2, 1, 3)

    q = split(linear(tokens, params.q.weight, params.q.bias))
    k = split(linear(tokens, params.k.weight, params.k.bias))
    v = split(linear(tokens, params.v.weight, params.v.bias))
    scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(n_windows, n, c)
    out = linear(out, params.proj.weight, params.proj.bias)
    out = window_reverse(out, window, h, w)
    return (out, attn) if return_attention else out


def reconstruction_loss(kind: str, pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f'loss: prediction {pred.shape} and target {target.shape} differ in shape')
    diff = pred - target
    if kind == 'mse':
        return (diff * diff).mean()
    if kind == 'l1':
        return diff.abs().mean()
    raise ParameterError(f'unknown loss "{kind}", expected one of {LOSSES}')
