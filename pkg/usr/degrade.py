"""
Synthetic degradation: LR = JPEG(resize(HR (x) k) + n), optionally applied twice.

Every sampled value is written to a ``DegradationRecord``; ``replay`` applies a
record without consulting any random state, so synthesis is reproducible
bit-for-bit from the record alone.
"""
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import getenv, cpu_count

import numpy as np
from scipy import ndimage
from twisted.logger import Logger

from usr.constants import (DEFAULT_SCALE, DEFAULT_THREADS_ENV, MODE_BLUR_NOISE_JPEG, MODE_BLUR_NOISE,
                           MODE_BLUR_JPEG, MODE_HIGH_ORDER)
from usr.errors import DataError, ParameterError
from usr.imageio import ImageBuffer
from usr.jpeg import jpeg_degrade, QUALITY_MIN, QUALITY_MAX
from usr.rng import DeterministicRng, StreamKey

log = Logger('degrade')

KERNEL_SIZE_MIN = 7
KERNEL_SIZE_MAX = 21
MIN_SIDE = 8
MIN_RESIZE_SIDE = 4
SIGMA_MIN = 0.2
SIGMA_MAX = 3.0
NOISE_SIGMA_MAX = 50.0 / 255.0
RESIZE_MODES = ('bicubic', 'bilinear', 'area')
NOISE_KINDS = ('gaussian-gray', 'gaussian-color')
BICUBIC_A = -0.5

BLUR = 'blur'
RESIZE = 'resize'
NOISE = 'noise'
JPEG = 'jpeg'


# -- blur ------------------------------------------------------------------------


@dataclass
class BlurKernel:
    size: int
    sigma_x: float
    sigma_y: float
    theta: float
    weights: np.ndarray

    def to_dict(self) -> dict:
        return {'size': self.size, 'sigma_x': self.sigma_x, 'sigma_y': self.sigma_y, 'theta': self.theta,
                'weights': self.weights.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> 'BlurKernel':
        size = int(d['size'])
        return cls(size, float(d['sigma_x']), float(d['sigma_y']), float(d['theta']),
                   np.array(d['weights'], dtype=np.float64).reshape(size, size))


def make_gaussian_kernel(size: int, sigma_x: float, sigma_y: float, theta: float = 0.0) -> BlurKernel:
    """
    Rotated anisotropic gaussian sampled at integer offsets and normalized to sum 1
    """
    if size % 2 == 0 or not KERNEL_SIZE_MIN <= size <= KERNEL_SIZE_MAX:
        raise ParameterError(f'kernel size must be odd in [{KERNEL_SIZE_MIN}, {KERNEL_SIZE_MAX}], got {size}')
    for s in (sigma_x, sigma_y):
        if not SIGMA_MIN <= s <= SIGMA_MAX:
            raise ParameterError(f'kernel sigma must lie in [{SIGMA_MIN}, {SIGMA_MAX}], got {s}')
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing='ij')
    c, s = math.cos(theta), math.sin(theta)
    # coordinates in the rotated principal frame
    u = c * xx + s * yy
    v = -s * xx + c * yy
    weights = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return BlurKernel(size, float(sigma_x), float(sigma_y), float(theta), weights / weights.sum())


def apply_blur(img: ImageBuffer, k: BlurKernel) -> ImageBuffer:
    """
    Per-channel correlation with reflect-101 borders
    """
    if k.size >= min(img.height, img.width):
        raise ParameterError(f'kernel size {k.size} must be smaller than the image {img.height}x{img.width}')
    require_min_side(img, 'blur')
    out = np.stack([ndimage.correlate(ch, k.weights, mode='mirror') for ch in img.data])
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def require_min_side(img: ImageBuffer, what: str):
    if min(img.height, img.width) < MIN_SIDE:
        raise DataError(f'{what} needs an image of at least {MIN_SIDE}x{MIN_SIDE}, got {img.height}x{img.width}')


# -- resize ----------------------------------------------------------------------


def _cubic(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """
    n_out x n_in weights such that out = M @ in along one axis
    """
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    ratio = n_in / n_out
    if mode == 'area':
        start = rows * ratio
        stop = start + ratio
        for j in range(n_in):
            m[:, j] = np.clip(np.minimum(stop, j + 1) - np.maximum(start, j), 0.0, None)
        return m / ratio
    src = (rows + 0.5) * ratio - 0.5
    base = np.floor(src).astype(int)
    if mode == 'bilinear':
        taps, weight = (0, 1), lambda t: np.maximum(1.0 - np.abs(t), 0.0)
    else:
        taps, weight = (-1, 0, 1, 2), _cubic
    for tap in taps:
        idx = base + tap
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), weight(src - idx))
    return m / m.sum(axis=1, keepdims=True)


def resize(img: ImageBuffer, out_h: int, out_w: int, mode: str = 'bicubic') -> ImageBuffer:
    """
    Separable resize with src = (dst + 0.5) * in / out - 0.5 and edge clamping
    """
    if mode not in RESIZE_MODES:
        raise ParameterError(f'unknown resize mode "{mode}", expected one of {RESIZE_MODES}')
    require_min_side(img, 'resize')
    if out_h < MIN_RESIZE_SIDE or out_w < MIN_RESIZE_SIDE:
        raise DataError(f'resize target {out_h}x{out_w} is below {MIN_RESIZE_SIDE}x{MIN_RESIZE_SIDE}')
    if (out_h, out_w) == (img.height, img.width):
        return ImageBuffer(img.data.copy())
    my = _interp_matrix(img.height, out_h, mode)
    mx = _interp_matrix(img.width, out_w, mode)
    out = np.einsum('oh,chw,pw->cop', my, img.data, mx)
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def bicubic_upsample(lr: ImageBuffer, scale: int) -> ImageBuffer:
    return resize(lr, lr.height * scale, lr.width * scale, 'bicubic')


# -- noise -----------------------------------------------------------------------


def add_noise(img: ImageBuffer, kind: str, sigma: float, rng: DeterministicRng) -> ImageBuffer:
    """
    Additive gaussian noise, clamped to [0, 1].

    gaussian-gray draws H*W values shared by every channel, gaussian-color
    draws C*H*W values in planar order; each batch of n gaussians consumes
    2*ceil(n/2) uniforms.
    """
    if kind not in NOISE_KINDS:
        raise ParameterError(f'unknown noise kind "{kind}", expected one of {NOISE_KINDS}')
    if not 0.0 <= sigma <= NOISE_SIGMA_MAX:
        raise ParameterError(f'noise sigma must lie in [0, 50/255], got {sigma}')
    require_min_side(img, 'noise')
    if sigma == 0.0:
        return ImageBuffer(img.data.copy())
    c, h, w = img.shape
    if kind == 'gaussian-gray':
        noise = rng.gaussian_array(h * w).reshape(1, h, w)
    else:
        noise = rng.gaussian_array(c * h * w).reshape(c, h, w)
    return ImageBuffer(np.clip(img.data + sigma * noise, 0.0, 1.0))


# -- pipeline --------------------------------------------------------------------


@dataclass
class StageSpec:
    """
    One operator of the pipeline with the ranges its parameters are drawn from.

    blur:   size (odd range), sigma, theta; ``isotropic`` forces sigma_x == sigma_y
    resize: scale range relative to the current size (``None``: exactly 1 / final_scale)
    noise:  sigma range, probability of gray noise
    jpeg:   quality range
    """
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class DegradationSpec:
    stages: list[StageSpec]
    order: int = 1
    second_order_prob: float = 0.5
    final_scale: int = DEFAULT_SCALE
    subsample_chroma: bool = False
    name: str = 'custom'

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ParameterError(f'order must be 1 or 2, got {self.order}')
        if self.final_scale < 1:
            raise ParameterError(f'final_scale must be >= 1, got {self.final_scale}')
        for stage in self.stages:
            if stage.kind not in (BLUR, RESIZE, NOISE, JPEG):
                raise ParameterError(f'unknown degradation stage "{stage.kind}"')


def _default_stages(kinds: tuple[str, ...], relative_resize: bool = False) -> list[StageSpec]:
    defaults = {
        BLUR: {'size': (KERNEL_SIZE_MIN, KERNEL_SIZE_MAX), 'sigma': (SIGMA_MIN, SIGMA_MAX), 'isotropic_prob': 0.5},
        RESIZE: {'scale': (0.5, 1.0) if relative_resize else None, 'modes': RESIZE_MODES},
        NOISE: {'sigma': (1.0 / 255.0, 30.0 / 255.0), 'gray_prob': 0.4},
        JPEG: {'quality': (30, 95)},
    }
    return [StageSpec(kind, dict(defaults[kind])) for kind in kinds]


def preset(mode: str, final_scale: int = DEFAULT_SCALE) -> DegradationSpec:
    """
    Named pipelines: "bnj", "bn", "bj" are single pass; "high" is the
    two-pass variant with a relative random resize per pass.
    """
    if mode == MODE_BLUR_NOISE_JPEG:
        return DegradationSpec(_default_stages((BLUR, RESIZE, NOISE, JPEG)), final_scale=final_scale, name=mode)
    if mode == MODE_BLUR_NOISE:
        return DegradationSpec(_default_stages((BLUR, RESIZE, NOISE)), final_scale=final_scale, name=mode)
    if mode == MODE_BLUR_JPEG:
        return DegradationSpec(_default_stages((BLUR, RESIZE, JPEG)), final_scale=final_scale, name=mode)
    if mode == MODE_HIGH_ORDER:
        return DegradationSpec(_default_stages((BLUR, RESIZE, NOISE, JPEG), relative_resize=True), order=2,
                               final_scale=final_scale, name=mode)
    raise ParameterError(f'unknown degradation mode "{mode}"')


FLOAT_TAG = '@f17:'
FLOAT_TAG_RE = re.compile(r'"@f17:([^"]*)"')


def _format_float(x: float) -> str:
    text = '%.17g' % x
    # keep it a float when read back
    return text if '.' in text or 'e' in text else text + '.0'


def _tag_floats(value):
    if isinstance(value, float):
        return FLOAT_TAG + _format_float(value)
    if isinstance(value, dict):
        return {k: _tag_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_tag_floats(v) for v in value]
    return value


@dataclass
class DegradationRecord:
    """
    The operations actually applied, in order, with every sampled value
    """
    key: StreamKey
    mode: str
    final_scale: int
    operations: list[dict] = field(default_factory=list)
    subsample_chroma: bool = False

    def count(self, kind: str) -> int:
        return sum(1 for op in self.operations if op['op'] == kind)

    def to_dict(self) -> dict:
        return {
            'stream': self.key.to_list(),
            'mode': self.mode,
            'final_scale': self.final_scale,
            'subsample_chroma': self.subsample_chroma,
            'operations': self.operations,
        }

    def to_json(self) -> str:
        """
        Sorted keys; every float written with 17 significant digits
        """
        text = json.dumps(_tag_floats(self.to_dict()), indent=2, sort_keys=True)
        return FLOAT_TAG_RE.sub(r'\1', text)

    @classmethod
    def from_dict(cls, d: dict) -> 'DegradationRecord':
        try:
            return cls(StreamKey.from_list(d['stream']), d['mode'], int(d['final_scale']),
                       list(d['operations']), bool(d.get('subsample_chroma', False)))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f'malformed degradation record: {e}')

    @classmethod
    def from_json(cls, text: str) -> 'DegradationRecord':
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise DataError(f'degradation record is not JSON: {e}')


def _odd_size(rng: DeterministicRng, low: int, high: int, limit: int) -> int:
    high = min(high, limit if limit % 2 else limit - 1)
    low = min(low, high)
    return low + 2 * rng.randint(0, (high - low) // 2)


class _Sampler:
    """
    Turns StageSpecs into concrete operations, consuming rng draws in stage order
    """

    def __init__(self, spec: DegradationSpec, rng: DeterministicRng):
        self.spec = spec
        self.rng = rng
        self.noise_streams = 0

    def sample(self, stage: StageSpec, h: int, w: int) -> dict:
        p, rng = stage.params, self.rng
        if stage.kind == BLUR:
            size = _odd_size(rng, *p['size'], limit=min(h, w) - 1)
            if size < KERNEL_SIZE_MIN:
                raise DataError(f'image {h}x{w} too small for a {KERNEL_SIZE_MIN}x{KERNEL_SIZE_MIN} blur kernel')
            sx = rng.uniform_range(*p['sigma'])
            if rng.uniform() < p.get('isotropic_prob', 0.0):
                sy, theta = sx, 0.0
            else:
                sy, theta = rng.uniform_range(*p['sigma']), rng.uniform_range(0.0, math.pi)
            return {'op': BLUR, 'kernel': make_gaussian_kernel(size, sx, sy, theta).to_dict()}
        if stage.kind == RESIZE:
            if p.get('scale') is None:
                out_h, out_w = h // self.spec.final_scale, w // self.spec.final_scale
            else:
                scale = rng.uniform_range(*p['scale'])
                out_h, out_w = max(int(round(h * scale)), 8), max(int(round(w * scale)), 8)
            return {'op': RESIZE, 'height': out_h, 'width': out_w, 'mode': rng.choice(p['modes'])}
        if stage.kind == NOISE:
            kind = NOISE_KINDS[0] if rng.uniform() < p['gray_prob'] else NOISE_KINDS[1]
            key = StreamKey(rng.key.seed, rng.key.index, f'{rng.key.tag}/noise{self.noise_streams}')
            self.noise_streams += 1
            return {'op': NOISE, 'kind': kind, 'sigma': rng.uniform_range(*p['sigma']), 'stream': key.to_list()}
        return {'op': JPEG, 'quality': rng.randint(*p['quality'])}


def apply_operation(img: ImageBuffer, op: dict, subsample_chroma: bool = False) -> ImageBuffer:
    kind = op['op']
    if kind == BLUR:
        return apply_blur(img, BlurKernel.from_dict(op['kernel']))
    if kind == RESIZE:
        return resize(img, int(op['height']), int(op['width']), op['mode'])
    if kind == NOISE:
        return add_noise(img, op['kind'], float(op['sigma']), DeterministicRng(StreamKey.from_list(op['stream'])))
    if kind == JPEG:
        return jpeg_degrade(img, int(op['quality']), subsample_chroma)
    raise DataError(f'unknown operation "{kind}" in degradation record')


def replay(hr: ImageBuffer, record: DegradationRecord) -> ImageBuffer:
    img = hr
    for op in record.operations:
        img = apply_operation(img, op, record.subsample_chroma)
    return img


def degrade_pipeline(hr: ImageBuffer, spec: DegradationSpec,
                     rng: DeterministicRng) -> tuple[ImageBuffer, DegradationRecord]:
    """
    Sample and apply ``spec`` to ``hr``. A final resize to exactly HR / final_scale
    is appended when the sampled stages did not land there.
    """
    s = spec.final_scale
    if hr.height % s or hr.width % s:
        raise DataError(f'HR size {hr.height}x{hr.width} is not a multiple of the scale {s}')
    target = hr.height // s, hr.width // s
    if min(target) < MIN_SIDE:
        raise DataError(f'LR size {target[0]}x{target[1]} would be below {MIN_SIDE}x{MIN_SIDE}')
    record = DegradationRecord(rng.key, spec.name, s, subsample_chroma=spec.subsample_chroma)
    sampler = _Sampler(spec, rng)
    passes = 1
    if spec.order == 2 and rng.uniform() < spec.second_order_prob:
        passes = 2

    img = hr
    for _ in range(passes):
        for stage in spec.stages:
            op = sampler.sample(stage, img.height, img.width)
            img = apply_operation(img, op, spec.subsample_chroma)
            record.operations.append(op)
    if (img.height, img.width) != target:
        op = {'op': RESIZE, 'height': target[0], 'width': target[1], 'mode': rng.choice(RESIZE_MODES)}
        img = apply_operation(img, op)
        record.operations.append(op)
    return img, record


# -- procedural data -------------------------------------------------------------


def procedural_texture(size: int, key: StreamKey, channels: int = 3) -> ImageBuffer:
    """
    Four random sinusoidal gratings plus three constant rectangles, min-max
    normalized to [0, 1]
    """
    rng = DeterministicRng(key)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing='ij')
    img = np.zeros((channels, size, size))
    for _ in range(4):
        freq = rng.uniform_range(0.5, 12.0) * 2.0 * math.pi / size
        angle = rng.uniform_range(0.0, math.pi)
        phase = rng.uniform_range(0.0, 2.0 * math.pi)
        grating = np.sin(freq * (math.cos(angle) * xx + math.sin(angle) * yy) + phase)
        for c in range(channels):
            img[c] += rng.uniform_range(0.2, 1.0) * grating
    for _ in range(3):
        h, w = rng.randint(size // 8, size // 2), rng.randint(size // 8, size // 2)
        top, left = rng.randint(0, size - h), rng.randint(0, size - w)
        for c in range(channels):
            img[c, top:top + h, left:left + w] = rng.uniform_range(-2.0, 2.0)
    low, high = img.min(), img.max()
    img = (img - low) / (high - low) if high > low else np.zeros_like(img)
    return ImageBuffer(np.clip(img, 0.0, 1.0))


@dataclass
class Sample:
    hr: ImageBuffer
    lr: ImageBuffer
    record: DegradationRecord | None = None
    name: str = ''


def worker_count(requested: int = None) -> int:
    """
    Worker threads for per-image work, capped by USR_THREADS
    """
    count = requested or cpu_count() or 1
    cap = getenv(DEFAULT_THREADS_ENV)
    if cap:
        try:
            count = min(count, max(int(cap), 1))
        except ValueError:
            raise ParameterError(f'{DEFAULT_THREADS_ENV} must be an integer, got "{cap}"')
    return count


def degrade_sample(index: int, name: str, hr: ImageBuffer, spec: DegradationSpec, seed: int) -> Sample:
    lr, record = degrade_pipeline(hr, spec, DeterministicRng(StreamKey(seed, index, f'degrade:{spec.name}')))
    return Sample(hr, lr, record, name)


def synth_sample(index: int, size: int, spec: DegradationSpec, seed: int) -> Sample:
    hr = procedural_texture(size, StreamKey(seed, index, 'hr'))
    return degrade_sample(index, f'{index:05d}', hr, spec, seed)


def synth_dataset(count: int, size: int, spec: DegradationSpec | str, seed: int,
                  threads: int = None) -> list[Sample]:
    """
    ``count`` procedural HR images with their degraded LR and record.

    Image ``i`` owns the streams (seed, i, "hr") and (seed, i, "degrade:<mode>"),
    so the result does not depend on the number of worker threads.
    """
    if isinstance(spec, str):
        spec = preset(spec)
    if count < 1:
        raise ParameterError(f'count must be >= 1, got {count}')
    if size % spec.final_scale:
        raise DataError(f'size {size} is not a multiple of the scale {spec.final_scale}')
    workers = worker_count(threads)
    log.info('synthesizing {count} images of {size}px, mode {mode}, {workers} workers',
             count=count, size=size, mode=spec.name, workers=workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: synth_sample(i, size, spec, seed), range(count)))


def degrade_dataset(images: list[tuple[str, ImageBuffer]], spec: DegradationSpec | str, seed: int,
                    threads: int = None) -> list[Sample]:
    """
    Degrade existing HR images; the i-th image (in the given order) owns the
    stream (seed, i, "degrade:<mode>")
    """
    if isinstance(spec, str):
        spec = preset(spec)
    if not images:
        raise DataError('no images to degrade')
    workers = worker_count(threads)
    log.info('degrading {count} images, mode {mode}, {workers} workers', count=len(images), mode=spec.name,
             workers=workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: degrade_sample(item[0], item[1][0], item[1][1], spec, seed),
                             enumerate(images)))
