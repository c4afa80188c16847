"""
Central-difference verification of analytic gradients
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from twisted.logger import Logger

from usr import ops
from usr.aude import AUDE, de_forward, us_loss, draw_noise
from usr.autograd import Tensor, no_grad
from usr.config import SRConfig, DEConfig, UncertaintyLossConfig, TrainConfig
from usr.constants import GRADCHECK_TOLERANCE
from usr.errors import NumericError, GradCheckFailure, ParameterError
from usr.model import USRModel
from usr.nn import initialize
from usr.rng import DeterministicRng, StreamKey
from usr.vddc import WindowAttention, HAB, VDDC

log = Logger('gradcheck')

DEFAULT_STEP = 1e-4
NETWORK_STEP = 1e-7
MAX_COORDS = 200
# roundoff units of the difference quotient below which a gradient counts as unresolved
RESOLUTION_UNITS = 1e8
EPS = float(np.finfo(np.float64).eps)
TINY = float(np.finfo(np.float64).tiny)
MODULES = ('all', 'nn', 'aude', 'vddc')


def grad_check(fn: Callable[[], Tensor], inputs: list[Tensor], h: float = DEFAULT_STEP,
               max_coords: int = None, seed: int = 0) -> float:
    """
    Worst relative error between ``fn``'s analytic gradient and central
    differences over the coordinates of ``inputs``.

    The step for coordinate x is s = h * (|x| + 1). The numeric derivative is
    the Richardson combination (4 D(s/2) - D(s)) / 3 of two central
    differences, which leaves no second-order truncation error. The error is

        |analytic - numeric| / max(|analytic|, |numeric|, floor)

    where ``floor`` is ``RESOLUTION_UNITS`` times the roundoff resolution
    eps * max|f| / s of the difference quotient. Gradients below the floor
    cannot be resolved by finite differences and are held to that absolute
    resolution instead. With ``max_coords`` a seeded subset of coordinates is
    checked.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.size != 1:
        raise ParameterError(f'grad_check needs a scalar function, got shape {out.shape}')
    f0 = out.item()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = DeterministicRng(StreamKey(seed, 0, 'gradcheck'))
        picked = set()
        while len(picked) < max_coords:
            picked.add(rng.randint(0, len(coords) - 1))
        coords = [coords[k] for k in sorted(picked)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            t = inputs[i]
            idx = np.unravel_index(j, t.shape)
            x = t.data[idx]
            step = h * (abs(x) + 1.0)
            values = [f0]

            def central(s: float) -> float:
                t.data[idx] = x + s
                f_plus = fn().item()
                t.data[idx] = x - s
                f_minus = fn().item()
                t.data[idx] = x
                values.extend((f_plus, f_minus))
                return (f_plus - f_minus) / (2.0 * s)

            numeric = (4.0 * central(step / 2.0) - central(step)) / 3.0
            a = analytic[i][idx]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f'non-finite gradient at input {i}, coordinate {j}')
            floor = RESOLUTION_UNITS * EPS * max(abs(v) for v in values) / step
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor, TINY))
    return worst


@dataclass
class GradCheckResult:
    module: str
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= GRADCHECK_TOLERANCE


def _random(rng: DeterministicRng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.gaussian_array(int(np.prod(shape))).reshape(shape) * scale)


def _cases_nn(rng: DeterministicRng):
    x = _random(rng, 2, 5, 5)
    w = _random(rng, 3, 2, 3, 3)
    b = _random(rng, 3)
    yield 'conv2d', lambda: (ops.conv2d(x, w, b, padding=1) * ops.conv2d(x, w, b, padding=1)).sum(), [x, w, b]
    xs = _random(rng, 2, 6, 6)
    ws = _random(rng, 3, 2, 3, 3)
    bs = _random(rng, 3)
    yield 'conv2d-stride2', lambda: (ops.conv2d(xs, ws, bs, padding=1, stride=2) * 0.5).sum(), [xs, ws, bs]

    f = _random(rng, 4, 6, 6)
    u = _random(rng, 4, 3, 3)
    target = _random(rng, 4, 6, 6)
    yield 'depthwise_dynamic_conv', lambda: (ops.depthwise_dynamic_conv(f, u) * target).sum(), [f, u]

    p = _random(rng, 8, 3, 3)
    pt = _random(rng, 2, 6, 6)
    yield 'pixel_shuffle', lambda: (ops.pixel_shuffle(p, 2) * pt).sum(), [p]

    attn = initialize(WindowAttention(4), 1)
    params = [attn.q.weight, attn.q.bias, attn.k.weight, attn.k.bias, attn.v.weight, attn.v.bias,
              attn.proj.weight, attn.proj.bias]
    fa = _random(rng, 4, 4, 4)
    ta = _random(rng, 4, 4, 4)
    yield 'window_msa', lambda: (ops.window_msa(fa, attn, 2, 2) * ta).sum(), [fa] + params

    xl = _random(rng, 3, 5)
    gamma = _random(rng, 5)
    beta = _random(rng, 5)
    tl = _random(rng, 3, 5)
    yield 'layer_norm', lambda: (ops.layer_norm(xl, gamma, beta) * tl).sum(), [xl, gamma, beta]

    for kind in ('relu', 'leaky_relu', 'sigmoid', 'gelu'):
        xa = _random(rng, 7)
        ta_ = _random(rng, 7)
        yield f'activation:{kind}', (lambda k=kind, xa=xa, ta_=ta_: (ops.activation(k, xa) * ta_).sum()), [xa]

    fg = _random(rng, 3, 7, 5)
    tg = _random(rng, 3)
    yield 'global_avg_pool', lambda: (ops.global_avg_pool(fg) * tg).sum(), [fg]

    for kind in ('mse', 'l1'):
        pr = _random(rng, 2, 3, 3)
        tr = _random(rng, 2, 3, 3)
        yield f'reconstruction_loss:{kind}', (lambda k=kind, pr=pr, tr=tr: ops.reconstruction_loss(k, pr, tr)), \
            [pr]

    xm = _random(rng, 3, 4)
    wm = _random(rng, 5, 4)
    bm = _random(rng, 5)
    yield 'linear+softmax', lambda: (ops.softmax(ops.linear(xm, wm, bm)) * ops.linear(xm, wm, bm)).sum(), \
        [xm, wm, bm]


def tiny_configs() -> tuple[SRConfig, DEConfig]:
    sr = SRConfig(channels=4, n_vddc=1, habs_per_block=1, window=4, heads=2, dyn_kernel=3, scale=2, mlp_ratio=2)
    return sr, DEConfig(udr_dim=sr.udr_dim, channels=4, blocks=1, hidden=8)


def _cases_aude(rng: DeterministicRng):
    _, de_cfg = tiny_configs()
    aude = initialize(AUDE(de_cfg), 3)
    aude.assign_names()
    p1 = _random(rng, 3, 16, 16, scale=0.3)
    p2 = _random(rng, 3, 16, 16, scale=0.3)
    z1, z2 = draw_noise(rng, de_cfg.udr_dim), draw_noise(rng, de_cfg.udr_dim)
    loss_cfg = UncertaintyLossConfig()

    def composite():
        s1 = de_forward(p1, aude.extractor, aude.contrast)
        s2 = de_forward(p2, aude.extractor, aude.contrast)
        return us_loss(s1, s2, z1, z2, loss_cfg)[0]

    yield 'de_forward+us_loss', composite, aude.parameters()


def _cases_vddc(rng: DeterministicRng):
    sr_cfg, de_cfg = tiny_configs()
    hab = initialize(HAB(sr_cfg), 5)
    f = _random(rng, 4, 8, 8)
    t = _random(rng, 4, 8, 8)
    yield 'hab_forward', lambda: (hab(f) * t).sum(), [f] + hab.parameters()

    block = initialize(VDDC(sr_cfg), 6)
    u = _random(rng, sr_cfg.udr_dim, scale=0.3)
    yield 'vddc_forward', lambda: (block(f, u) * t).sum(), [f, u] + block.parameters()

    cfg = TrainConfig(sr=sr_cfg, de=de_cfg, seed=7)
    model = USRModel.initialized(cfg)
    lr = Tensor(np.clip(_random(rng, 3, 16, 16, scale=0.2).data + 0.5, 0.0, 1.0))
    hr = Tensor(np.clip(_random(rng, 3, 32, 32, scale=0.2).data + 0.5, 0.0, 1.0))
    yield 'usr_forward+mse', lambda: ops.reconstruction_loss('mse', model(lr), hr), model.parameters()

    p1 = _random(rng, 3, 16, 16, scale=0.3)
    p2 = _random(rng, 3, 16, 16, scale=0.3)
    z1, z2 = draw_noise(rng, de_cfg.udr_dim), draw_noise(rng, de_cfg.udr_dim)
    loss_cfg = UncertaintyLossConfig()

    def joint():
        s1 = de_forward(p1, model.de.extractor, model.de.contrast)
        s2 = de_forward(p2, model.de.extractor, model.de.contrast)
        return ops.reconstruction_loss('mse', model(lr), hr) + us_loss(s1, s2, z1, z2, loss_cfg)[0]

    yield 'usr_forward+us_loss', joint, model.parameters()


SUITES = {'nn': _cases_nn, 'aude': _cases_aude, 'vddc': _cases_vddc}


def run_suite(module: str = 'all', seed: int = 0) -> list[GradCheckResult]:
    """
    Check every case of the selected module(s); never raises on a failed
    case, callers inspect ``GradCheckResult.passed``
    """
    if module not in MODULES:
        raise ParameterError(f'unknown gradcheck module "{module}", expected one of {MODULES}')
    results = []
    for name in (SUITES if module == 'all' else [module]):
        rng = DeterministicRng(StreamKey(seed, 0, f'gradcheck:{name}'))
        for case, fn, inputs in SUITES[name](rng):
            composite = name != 'nn'
            error = grad_check(fn, inputs, h=NETWORK_STEP if composite else DEFAULT_STEP,
                               max_coords=MAX_COORDS if composite else None, seed=seed)
            results.append(GradCheckResult(name, case, error))
            log.debug('{module}/{case}: {error:.3e}', module=name, case=case, error=error)
    return results


def require_pass(results: list[GradCheckResult]):
    failed = [r for r in results if not r.passed]
    if failed:
        raise GradCheckFailure(f'{len(failed)} gradient check(s) above {GRADCHECK_TOLERANCE}: '
                               + ', '.join(f'{r.module}/{r.name}={r.error:.2e}' for r in failed))
