from dataclasses import dataclass, field

import numpy as np

from usr.errors import NumericError, DimensionError, ParameterError
from usr.nn import Parameter


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], grads: list[np.ndarray | None], state: AdamState):
    """
    One bias-corrected Adam update in place.

    Every gradient is checked before anything is written, so a non-finite
    gradient leaves both parameters and state untouched. A ``None`` gradient
    counts as zero.

    Moments are keyed by parameter name, so every parameter needs its own
    non-empty name.
    """
    if len(params) != len(grads):
        raise DimensionError(f'{len(params)} parameters but {len(grads)} gradients')
    names = [p.name for p in params]
    if '' in names or len(set(names)) != len(names):
        duplicates = sorted({n for n in names if names.count(n) > 1})
        raise ParameterError(f'Adam needs unique, non-empty parameter names, got duplicates {duplicates}')
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f'gradient of "{p.name}" has shape {g.shape}, parameter {p.shape}')
        if not np.all(np.isfinite(g)):
            raise NumericError(f'non-finite gradient for "{p.name}", update aborted')

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))
