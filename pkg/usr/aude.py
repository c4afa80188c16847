"""
Uncertainty-aware degradation extraction.

The extractor maps an LR patch to a diagonal gaussian (mu, logvar) over the
degradation representation and a scalar confidence alpha. Two patches of the
same image are compared through reparameterized samples; the loss penalises
their alpha-weighted disagreement and rewards disagreement of the alphas.
"""
from dataclasses import dataclass

import numpy as np
from twisted.logger import Logger

from usr.autograd import Tensor, as_tensor
from usr.config import DEConfig, UncertaintyLossConfig
from usr.constants import LOSS_FULL, LOSS_NO_LU, LOSS_NO_LUR
from usr.errors import DataError, DimensionError
from usr.imageio import ImageBuffer
from usr.nn import Module, ModuleList, Conv2d, Linear
from usr.ops import activation, global_avg_pool, concat, clamp, sigmoid
from usr.rng import DeterministicRng

LOGVAR_MIN = -12.0
LOGVAR_MAX = 4.0
MIN_PATCH = 16
COLLAPSE_ALPHA = 0.05
COLLAPSE_LOGVAR = -10.0


class ConvBlock(Module):
    """
    conv, relu, conv (no residual)
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = Conv2d(channels, channels)
        self.conv2 = Conv2d(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(activation('relu', self.conv1(x)))


class DegradationExtractor(Module):

    def __init__(self, cfg: DEConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.channels)
        self.blocks = ModuleList(ConvBlock(cfg.channels) for _ in range(cfg.blocks))
        self.fc1 = Linear(cfg.channels, cfg.hidden)
        self.fc2 = Linear(cfg.hidden, cfg.hidden)
        self.fc3 = Linear(cfg.hidden, 2 * cfg.udr_dim)

    @property
    def udr_dim(self) -> int:
        return self.cfg.udr_dim

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        f = activation('relu', self.stem(x))
        for block in self.blocks:
            f = block(f)
        h = global_avg_pool(f)
        slope = self.cfg.leaky_slope
        for fc in (self.fc1, self.fc2, self.fc3):
            h = activation('leaky_relu', fc(h), slope)
        d = self.cfg.udr_dim
        return h[:d], clamp(h[d:], LOGVAR_MIN, LOGVAR_MAX)


class ContrastHead(Module):
    """
    linear(2d -> 1) followed by a sigmoid
    """

    def __init__(self, udr_dim: int):
        super().__init__()
        self.fc = Linear(2 * udr_dim, 1)

    def forward(self, mu: Tensor, logvar: Tensor) -> Tensor:
        return sigmoid(self.fc(concat([mu, logvar])))


class AUDE(Module):

    def __init__(self, cfg: DEConfig):
        super().__init__()
        self.extractor = DegradationExtractor(cfg)
        self.contrast = ContrastHead(cfg.udr_dim)

    @property
    def udr_dim(self) -> int:
        return self.extractor.udr_dim

    def forward(self, patch) -> 'UncertainUDR':
        return de_forward(patch, self.extractor, self.contrast)


@dataclass
class UncertainUDR:
    mu: Tensor
    logvar: Tensor
    alpha: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def udr(self) -> Tensor:
        return self.alpha * self.mu


def _as_input(patch) -> Tensor:
    if isinstance(patch, ImageBuffer):
        return Tensor(patch.to_rgb().data)
    return as_tensor(patch)


def de_forward(patch, extractor: DegradationExtractor, contrast: ContrastHead) -> UncertainUDR:
    x = _as_input(patch)
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f'extractor expects a 3 x H x W patch, got {x.shape}')
    if x.shape[1] < MIN_PATCH or x.shape[2] < MIN_PATCH:
        raise DataError(f'patch {x.shape[1]}x{x.shape[2]} smaller than {MIN_PATCH}x{MIN_PATCH}')
    mu, logvar = extractor(x)
    return UncertainUDR(mu, logvar, contrast(mu, logvar))


def infer_udr(lr, extractor: DegradationExtractor, contrast: ContrastHead) -> Tensor:
    """
    alpha * mu over the whole image, no sampling
    """
    return de_forward(lr, extractor, contrast).udr()


def sample_udr(stats: UncertainUDR, z) -> Tensor:
    """
    u = mu + exp(logvar / 2) * z; ``z`` is a constant, one row per sample
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.shape[-1] != stats.dim:
        raise DimensionError(f'noise has width {z.shape[-1]}, representation {stats.dim}')
    return stats.mu + (stats.logvar * 0.5).exp() * z


def draw_noise(rng: DeterministicRng, d: int, num_samples: int = 1) -> np.ndarray:
    return rng.gaussian_array(num_samples * d).reshape(num_samples, d)


def us_loss(s1: UncertainUDR, s2: UncertainUDR, z1, z2,
            cfg: UncertaintyLossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """
    Returns (loss, l_u, l_ur).

    l_u  = (1/kT) * mean over samples of sum_i |a1 u1_i - a2 u2_i|
    l_ur = |a1 - a2|
    loss = l_u - lambda * l_ur for the full variant, -lambda * l_ur without
    l_u, l_u without l_ur.
    """
    if s1.dim != s2.dim:
        raise DimensionError(f'representations differ in width: {s1.dim} vs {s2.dim}')
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z1.shape != z2.shape or z1.shape[0] != cfg.num_samples:
        raise DimensionError(f'expected {cfg.num_samples} noise rows per side, got {z1.shape} and {z2.shape}')
    u1 = sample_udr(s1, z1) * s1.alpha
    u2 = sample_udr(s2, z2) * s2.alpha
    l_u = (u1 - u2).abs().sum(axis=-1).mean() * (1.0 / cfg.kT)
    l_ur = (s1.alpha - s2.alpha).abs().sum()
    if cfg.variant == LOSS_NO_LU:
        loss = l_ur * (-cfg.lam)
    elif cfg.variant == LOSS_NO_LUR:
        loss = l_u * 1.0
    else:
        assert cfg.variant == LOSS_FULL
        loss = l_u - l_ur * cfg.lam
    return loss, l_u, l_ur


@dataclass
class PatchPair:
    x1: ImageBuffer
    x2: ImageBuffer
    offset1: tuple[int, int]
    offset2: tuple[int, int]


def sample_patch_pair(lr: ImageBuffer, patch: int, rng: DeterministicRng) -> PatchPair:
    """
    Two uniformly placed crops; the second placement is re-drawn once when it
    coincides with the first and the image leaves room for another.
    """
    if lr.height < patch or lr.width < patch:
        raise DataError(f'image {lr.height}x{lr.width} smaller than patch {patch}')

    def draw():
        return rng.randint(0, lr.height - patch), rng.randint(0, lr.width - patch)

    first = draw()
    second = draw()
    if second == first and (lr.height > patch or lr.width > patch):
        second = draw()
    return PatchPair(lr.crop(*first, patch, patch), lr.crop(*second, patch, patch), first, second)


class CollapseMonitor:
    """
    Flags a degenerate minimum once ``window`` consecutive steps show both
    alphas below 0.05 or a mean logvar below -10
    """
    log = Logger('CollapseMonitor')

    def __init__(self, window: int = 100):
        self.window = window
        self.streak = 0
        self.flagged = 0

    @staticmethod
    def degenerate(alpha1: float, alpha2: float, mean_logvar: float) -> bool:
        return (alpha1 < COLLAPSE_ALPHA and alpha2 < COLLAPSE_ALPHA) or mean_logvar < COLLAPSE_LOGVAR

    def update(self, step: int, alpha1: float, alpha2: float, mean_logvar: float) -> bool:
        self.streak = self.streak + 1 if self.degenerate(alpha1, alpha2, mean_logvar) else 0
        if self.streak and self.streak % self.window == 0:
            self.flagged += 1
            self.log.warn('representation collapse at step {step}: alpha=({a1:.4f}, {a2:.4f}), '
                          'mean logvar {lv:.2f} for {n} steps',
                          step=step, a1=alpha1, a2=alpha2, lv=mean_logvar, n=self.streak)
            return True
        return False
