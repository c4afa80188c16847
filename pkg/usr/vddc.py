"""
Super-resolution network conditioned on the degradation representation.

Each variable depth dynamic convolution (VDDC) block reshapes the
representation u (length d = C * k * k) into per-channel k x k kernels,
scales it by its own gamma = sigmoid(W^T u + b), convolves the features
depthwise with it and refines the result with hybrid attention blocks and a
residual transformer group.
"""
import numpy as np

from usr.autograd import Tensor, as_tensor
from usr.config import SRConfig
from usr.errors import DimensionError, ParameterError
from usr.imageio import ImageBuffer
from usr.nn import Module, ModuleList, Parameter, Linear, Conv2d, LayerNorm, INIT_HE
from usr.ops import (activation, depthwise_dynamic_conv, global_avg_pool, pixel_shuffle, sigmoid, window_msa)

CAB_WEIGHT = 0.01
CAB_REDUCTION = 4


def ais_gamma(u, weight, bias) -> Tensor:
    """
    gamma = sigmoid(W^T u + b), a (1,) tensor in (0, 1)
    """
    u, weight, bias = as_tensor(u), as_tensor(weight), as_tensor(bias)
    if u.shape != weight.shape or u.ndim != 1:
        raise DimensionError(f'AIS weight {weight.shape} does not match representation {u.shape}')
    return sigmoid((weight * u).sum() + bias)


def ais_scale(u, gamma) -> Tensor:
    return as_tensor(u) * gamma


def udr_kernel(u: Tensor, channels: int, k: int) -> Tensor:
    """
    Row-major view of a length C*k*k vector as C x k x k kernels
    """
    if u.shape != (channels * k * k,):
        raise DimensionError(f'representation of shape {u.shape} cannot form {channels}x{k}x{k} kernels')
    return u.reshape(channels, k, k)


class WindowAttention(Module):

    def __init__(self, channels: int):
        super().__init__()
        self.q = Linear(channels, channels)
        self.k = Linear(channels, channels)
        self.v = Linear(channels, channels)
        self.proj = Linear(channels, channels)


class ChannelAttention(Module):
    """
    pool -> linear(C -> C/4) -> relu -> linear(C/4 -> C) -> sigmoid, gating the input channels
    """

    def __init__(self, channels: int):
        super().__init__()
        self.down = Linear(channels, channels // CAB_REDUCTION)
        self.up = Linear(channels // CAB_REDUCTION, channels)

    def forward(self, f: Tensor) -> Tensor:
        gate = sigmoid(self.up(activation('relu', self.down(global_avg_pool(f)))))
        return f * gate.reshape(-1, 1, 1)


class MLP(Module):

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        self.fc1 = Linear(channels, channels * ratio)
        self.fc2 = Linear(channels * ratio, channels)

    def forward(self, f: Tensor) -> Tensor:
        # C x H x W -> H x W x C tokens and back
        tokens = f.permute(1, 2, 0)
        return self.fc2(activation('gelu', self.fc1(tokens))).permute(2, 0, 1)


class HAB(Module):
    """
    F'  = F + W-MSA(LN(F)) + 0.01 * CAB(LN(F))
    F'' = F' + MLP(LN(F'))
    """

    def __init__(self, cfg: SRConfig, channel_attention: bool = True):
        super().__init__()
        self.window, self.heads = cfg.window, cfg.heads
        self.norm1 = LayerNorm(cfg.channels)
        self.attn = WindowAttention(cfg.channels)
        if channel_attention:
            self.cab = ChannelAttention(cfg.channels)
        self.norm2 = LayerNorm(cfg.channels)
        self.mlp = MLP(cfg.channels, cfg.mlp_ratio)

    def forward(self, f: Tensor) -> Tensor:
        x = self.norm1.over_channels(f)
        branch = window_msa(x, self.attn, self.window, self.heads)
        if 'cab' in self._children:
            branch = branch + self.cab(x) * CAB_WEIGHT
        f = f + branch
        return f + self.mlp(self.norm2.over_channels(f))


def hab_forward(f, params: HAB) -> Tensor:
    return params(as_tensor(f))


class VDDC(Module):

    def __init__(self, cfg: SRConfig):
        super().__init__()
        self.cfg = cfg
        self.ais_weight = Parameter((cfg.udr_dim,), INIT_HE, cfg.udr_dim)
        self.ais_bias = Parameter((1,))
        self.habs = ModuleList(HAB(cfg) for _ in range(cfg.habs_per_block))
        # layer norm, W-MSA, layer norm, MLP
        self.group = HAB(cfg, channel_attention=False)
        self.tail = Conv2d(cfg.channels, cfg.channels)

    def gamma(self, u: Tensor) -> Tensor:
        return ais_gamma(u, self.ais_weight, self.ais_bias)

    def forward(self, f: Tensor, u: Tensor | None) -> Tensor:
        x = f
        if u is not None:
            scaled = ais_scale(u, self.gamma(u)) if self.cfg.ais_enabled else u
            x = f + depthwise_dynamic_conv(f, udr_kernel(scaled, self.cfg.channels, self.cfg.dyn_kernel))
        for hab in self.habs:
            x = hab(x)
        x = self.group(x)
        return self.tail(x) + f


def vddc_forward(f, u, params: 'VDDC | USRNet', block_index: int = None) -> Tensor:
    """
    One VDDC block; with a whole ``USRNet`` the block is picked by ``block_index``
    """
    if isinstance(params, USRNet):
        if block_index is None or not 0 <= block_index < len(params.blocks):
            raise ParameterError(f'block_index must lie in [0, {len(params.blocks)}), got {block_index}')
        params = params.blocks[block_index]
    elif block_index is not None:
        raise ParameterError('block_index selects a block of a USRNet, got a single VDDC block')
    return params(as_tensor(f), None if u is None else as_tensor(u))


class USRNet(Module):
    """
    shallow conv -> N VDDC blocks (+ global skip) -> conv, pixel shuffle, conv
    """

    def __init__(self, cfg: SRConfig):
        super().__init__()
        self.cfg = cfg
        self.shallow = Conv2d(3, cfg.channels)
        self.blocks = ModuleList(VDDC(cfg) for _ in range(cfg.n_vddc))
        self.upconv = Conv2d(cfg.channels, 3 * cfg.scale ** 2)
        self.outconv = Conv2d(3, 3)

    def forward(self, lr, udr) -> Tensor:
        """
        ``udr`` of None removes the dynamic convolution branch altogether
        """
        x = as_tensor(lr.to_rgb().data if isinstance(lr, ImageBuffer) else lr)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionError(f'network expects a 3 x H x W image, got {x.shape}')
        if x.shape[1] % self.cfg.window or x.shape[2] % self.cfg.window:
            raise DimensionError(f'LR size {x.shape[1]}x{x.shape[2]} not divisible by window {self.cfg.window}')
        if udr is not None:
            udr = as_tensor(udr)
            if udr.shape != (self.cfg.udr_dim,):
                raise DimensionError(f'representation has shape {udr.shape}, expected ({self.cfg.udr_dim},)')
        shallow = self.shallow(x)
        f = shallow
        for block in self.blocks:
            f = block(f, udr)
        f = f + shallow
        return self.outconv(pixel_shuffle(self.upconv(f), self.cfg.scale))

    def gammas(self, udr) -> list[float]:
        udr = as_tensor(udr)
        return [block.gamma(udr).item() if self.cfg.ais_enabled else 1.0 for block in self.blocks]


def usr_forward(lr, udr, params: USRNet, cfg: SRConfig = None) -> Tensor:
    """
    Unclamped network output; clamp with ``ImageBuffer.from_tensor`` when emitting an image
    """
    if cfg is not None and cfg is not params.cfg and cfg != params.cfg:
        raise DimensionError('network parameters were built for a different configuration')
    return params(lr, udr)


def zero_udr(cfg: SRConfig) -> Tensor:
    return Tensor(np.zeros(cfg.udr_dim))
