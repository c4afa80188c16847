import collections.abc
import copy
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, asdict
from os.path import getmtime, isfile
from typing import Any

from twisted.logger import Logger
from yaml import load, dump, YAMLError
try:
    from yaml import CLoader as Loader, CDumper as Dumper
except ImportError:
    from yaml import Loader, Dumper

from usr.constants import (DEFAULT_SEED, DEFAULT_SCALE, MODE_BLUR_NOISE_JPEG, VARIANT_FULL, VARIANTS,
                           LOSS_FULL, LOSS_VARIANTS)
from usr.errors import DataError, ParameterError


class AbstractConfig(ABC):
    """
    Generic yaml configuration with convenience methods

    JSON documents load as well, JSON being a subset of YAML.
    """
    _log = Logger()

    def __init__(self, path: str = None, overrides: dict = None):
        self._modify_time = 0
        self._path = None
        self._config = {}
        self._overrides = overrides or {}
        self.load_file(path)

    @property
    def path(self) -> str:
        """
        The path of the currently loaded config file
        """
        return self._path

    @property
    def modified(self) -> float:
        """
        Config file modify time (epoch)
        """
        return self._modify_time

    @property
    def config(self) -> dict:
        """
        Retrieve current configuration
        """
        if self.path and isfile(self.path) and getmtime(self.path) > self.modified:
            self.reload()

        return self._config

    def reload(self):
        """
        Reload configuration from file
        """
        self.load_file(self._path)

    def load_file(self, path: str):
        """
        Load yaml configuration from file
        """
        self._path = path

        if path and isfile(path):
            try:
                with open(path, 'r') as fp:
                    self._config = load(fp, Loader) or {}  # an empty file will load to None
            except YAMLError as e:
                raise DataError(f'not a yaml or json document: "{path}", error: {e}')
            if not isinstance(self._config, collections.abc.Mapping):
                raise DataError(f'configuration root must be a mapping: "{path}"')
            self._modify_time = getmtime(path)
        elif path:
            raise DataError(f'configuration file not found: "{path}"')
        else:
            self._modify_time = 0
            self._config = {}

        self._config = self._recursive_update(self._config, self._overrides)
        self._config = self.apply_defaults(self.get_default())
        self._log.debug('loaded configuration from {path}', path=path or '<defaults>')

    @abstractmethod
    def get_default(self) -> dict[str, Any]:
        pass

    def apply_defaults(self, default_config: dict) -> dict:
        return self._recursive_update(default_config, self._config)

    @staticmethod
    def _recursive_update(base: dict, changes: dict) -> dict:
        # d is the thing we are updating
        def update(d, u):
            for k, v in u.items():
                if isinstance(v, collections.abc.Mapping):
                    d[k] = update(d.get(k) or {}, v)
                elif v is not None or k not in d:
                    d[k] = v
            return d

        # copy the base in place
        base = copy.deepcopy(base)
        return update(base, changes)

    def to_json(self) -> str:
        return json.dumps(self.config, indent=4, sort_keys=True)

    def __str__(self):
        return dump(self.config, indent=2, Dumper=Dumper)


class RunConfig(AbstractConfig):
    """
    The single configuration document behind every command.

    Command-line flags are passed as ``overrides`` (a nested dict) and win over
    the document, the document wins over the defaults.
    """

    def get_default(self) -> dict[str, Any]:
        return {
            "seed": DEFAULT_SEED,
            "sr": {
                "channels": 16,
                "n_vddc": 2,
                "habs_per_block": 2,
                "window": 4,
                "heads": 2,
                "dyn_kernel": 3,
                "scale": DEFAULT_SCALE,
                "mlp_ratio": 2,
            },
            "de": {
                "channels": 32,
                "blocks": 5,
                "hidden": 64,
                "leaky_slope": 0.1,
            },
            "loss": {
                "kT": 1.0,
                "lambda": 0.1,
                "num_samples": 1,
                "variant": LOSS_FULL,
            },
            "train": {
                "steps": [200, 200, 200],
                "batch": 4,
                "lr_patch": 48,
                "pair_patch": 32,
                "lr": [2e-4, 1e-4, 5e-5],
                "beta1": 0.9,
                "beta2": 0.99,
                "eps": 1e-8,
                "variant": VARIANT_FULL,
                "collapse_window": 100,
            },
            "data": {
                "kind": "procedural",
                "count": 32,
                "size": 192,
                "mode": MODE_BLUR_NOISE_JPEG,
                "directory": None,
            },
        }


@dataclass
class SRConfig:
    channels: int = 16
    n_vddc: int = 2
    habs_per_block: int = 2
    window: int = 4
    heads: int = 2
    dyn_kernel: int = 3
    scale: int = DEFAULT_SCALE
    mlp_ratio: int = 2
    ais_enabled: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.n_vddc < 0 or self.habs_per_block < 0:
            raise ParameterError(f'invalid network size: channels={self.channels}, n_vddc={self.n_vddc}, '
                                 f'habs_per_block={self.habs_per_block}')
        if self.channels % self.heads:
            raise ParameterError(f'channels ({self.channels}) must be divisible by heads ({self.heads})')
        if self.channels % 4:
            raise ParameterError(f'channels ({self.channels}) must be divisible by the channel-attention reduction 4')
        if self.dyn_kernel % 2 == 0:
            raise ParameterError(f'dyn_kernel must be odd, got {self.dyn_kernel}')
        if self.scale < 1 or self.window < 1:
            raise ParameterError(f'scale and window must be positive')

    @property
    def udr_dim(self) -> int:
        return self.channels * self.dyn_kernel ** 2

    @classmethod
    def from_dict(cls, conf: dict) -> 'SRConfig':
        return cls(**{k: v for k, v in conf.items() if k in cls.__dataclass_fields__})


@dataclass
class DEConfig:
    udr_dim: int = 144
    channels: int = 32
    blocks: int = 5
    hidden: int = 64
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.udr_dim < 1 or self.channels < 1 or self.blocks < 0 or self.hidden < 1:
            raise ParameterError(f'invalid degradation extractor size: {asdict(self)}')
        if not 0 < self.leaky_slope < 1:
            raise ParameterError(f'leaky_slope must lie in (0, 1), got {self.leaky_slope}')

    @classmethod
    def from_dict(cls, conf: dict, udr_dim: int) -> 'DEConfig':
        values = {k: v for k, v in conf.items() if k in cls.__dataclass_fields__}
        values['udr_dim'] = udr_dim
        return cls(**values)


@dataclass
class UncertaintyLossConfig:
    kT: float = 1.0
    lam: float = 0.1
    num_samples: int = 1
    variant: str = LOSS_FULL

    def __post_init__(self):
        if self.kT <= 0:
            raise ParameterError(f'kT must be > 0, got {self.kT}')
        if self.lam < 0:
            raise ParameterError(f'lambda must be >= 0, got {self.lam}')
        if self.num_samples < 1:
            raise ParameterError(f'num_samples must be >= 1, got {self.num_samples}')
        if self.variant not in LOSS_VARIANTS:
            raise ParameterError(f'unknown USLoss variant "{self.variant}", expected one of {LOSS_VARIANTS}')

    @classmethod
    def from_dict(cls, conf: dict) -> 'UncertaintyLossConfig':
        return cls(kT=float(conf.get('kT', 1.0)), lam=float(conf.get('lambda', 0.1)),
                   num_samples=int(conf.get('num_samples', 1)), variant=conf.get('variant', LOSS_FULL))


@dataclass
class TrainConfig:
    steps: tuple[int, int, int] = (200, 200, 200)
    batch: int = 4
    lr_patch: int = 48
    pair_patch: int = 32
    lr: tuple[float, float, float] = (2e-4, 1e-4, 5e-5)
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    variant: str = VARIANT_FULL
    collapse_window: int = 100
    seed: int = DEFAULT_SEED
    sr: SRConfig = field(default_factory=SRConfig)
    de: DEConfig = field(default_factory=DEConfig)
    loss: UncertaintyLossConfig = field(default_factory=UncertaintyLossConfig)

    def __post_init__(self):
        self.steps = tuple(int(s) for s in self.steps)
        self.lr = tuple(float(r) for r in self.lr)
        if len(self.steps) != 3 or len(self.lr) != 3:
            raise ParameterError('steps and lr need exactly one entry per stage (3)')
        if any(s < 0 for s in self.steps) or any(r < 0 for r in self.lr):
            raise ParameterError(f'stage lengths and learning rates must be >= 0: {self.steps}, {self.lr}')
        if self.batch < 1:
            raise ParameterError(f'batch must be >= 1, got {self.batch}')
        if self.variant not in VARIANTS:
            raise ParameterError(f'unknown variant "{self.variant}", expected one of {VARIANTS}')
        if self.de.udr_dim != self.sr.udr_dim:
            raise ParameterError(f'degradation extractor width {self.de.udr_dim} does not match '
                                 f'udr_dim {self.sr.udr_dim} of the SR network')

    @classmethod
    def from_run_config(cls, conf: dict) -> 'TrainConfig':
        sr = SRConfig.from_dict(conf['sr'])
        train = conf['train']
        return cls(
            steps=train['steps'],
            batch=int(train['batch']),
            lr_patch=int(train['lr_patch']),
            pair_patch=int(train['pair_patch']),
            lr=train['lr'],
            beta1=float(train['beta1']),
            beta2=float(train['beta2']),
            eps=float(train['eps']),
            variant=train['variant'],
            collapse_window=int(train['collapse_window']),
            seed=int(conf['seed']),
            sr=sr,
            de=DEConfig.from_dict(conf['de'], sr.udr_dim),
            loss=UncertaintyLossConfig.from_dict(conf['loss']),
        )

    def to_dict(self) -> dict:
        return asdict(self)
