"""
Parameter containers and the small set of layers the networks are built from
"""
import math
from collections import OrderedDict
from typing import Iterator

import numpy as np
from twisted.logger import Logger

from usr.autograd import Tensor
from usr.errors import IncompatibleCheckpointError
from usr.ops import conv2d, linear, layer_norm, channel_layer_norm
from usr.rng import DeterministicRng, StreamKey

INIT_HE = 'he'
INIT_ZEROS = 'zeros'
INIT_ONES = 'ones'


class Parameter(Tensor):
    """
    Trainable tensor. ``init`` names how ``initialize`` fills it; ``fan_in`` is
    used by the He-uniform rule.
    """

    def __init__(self, shape: tuple[int, ...], init: str = INIT_ZEROS, fan_in: int = 1):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init
        self.fan_in = fan_in
        self.name = ''


class Module:
    """
    Registers Parameters and child Modules by attribute assignment, in definition order
    """

    def __init__(self):
        object.__setattr__(self, '_children', OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, (Parameter, Module)):
            self.__dict__.setdefault('_children', OrderedDict())[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError()

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Parameter]]:
        for key, child in self._children.items():
            name = f'{prefix}{key}'
            if isinstance(child, Parameter):
                yield name, child
            else:
                yield from child.named_parameters(f'{name}.')

    def assign_names(self, prefix: str = ''):
        """
        Stamp every parameter with its dotted path from this module
        """
        for name, p in self.named_parameters(prefix):
            p.name = name

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict):
        """
        Copy arrays into the parameters; every name and shape must agree
        """
        own = OrderedDict(self.named_parameters())
        mismatched = [n for n in own if n not in state or state[n].shape != own[n].shape]
        mismatched += [n for n in state if n not in own]
        if mismatched:
            raise IncompatibleCheckpointError(
                f'parameter table does not match the model, first mismatch: "{mismatched[0]}"', mismatched)
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.data.dtype)


class ModuleList(Module):

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Linear(Module):

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = Parameter((out_features, in_features), INIT_HE, in_features)
        self.bias = Parameter((out_features,))

    def forward(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """
    k x k convolution with zero 'same' padding
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        self.padding = kernel // 2
        self.weight = Parameter((out_channels, in_channels, kernel, kernel), INIT_HE, in_channels * kernel * kernel)
        self.bias = Parameter((out_channels,))

    def forward(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class LayerNorm(Module):

    def __init__(self, features: int):
        super().__init__()
        self.gamma = Parameter((features,), INIT_ONES)
        self.beta = Parameter((features,))

    def forward(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def over_channels(self, f) -> Tensor:
        return channel_layer_norm(f, self.gamma, self.beta)


class Initializer:
    """
    He-uniform for weights, zeros for biases and layer-norm beta, ones for gamma.

    Each parameter draws from its own stream keyed by (seed, 0, "init:<name>"),
    so the values do not depend on construction order.
    """
    log = Logger('Initializer')

    def __init__(self, seed: int):
        self.seed = seed

    def __call__(self, module: Module, prefix: str = '') -> Module:
        count = 0
        for name, p in module.named_parameters(prefix):
            if p.init == INIT_HE:
                bound = math.sqrt(6.0 / p.fan_in)
                rng = DeterministicRng(StreamKey(self.seed, 0, f'init:{name}'))
                p.data = (2.0 * rng.uniform_array(p.size) - 1.0).reshape(p.shape) * bound
            elif p.init == INIT_ONES:
                p.data = np.ones(p.shape)
            else:
                p.data = np.zeros(p.shape)
            count += p.size
        self.log.debug('initialized {count} values with seed {seed}', count=count, seed=self.seed)
        return module


def initialize(module: Module, seed: int, prefix: str = '') -> Module:
    return Initializer(seed)(module, prefix)
