from dataclasses import replace

import numpy as np

from usr.aude import AUDE, infer_udr
from usr.autograd import Tensor, no_grad
from usr.config import TrainConfig
from usr.constants import VARIANT_FULL, VARIANT_NO_AIS, VARIANT_NO_AUDE, VARIANT_NEITHER
from usr.imageio import ImageBuffer
from usr.nn import Module, initialize
from usr.vddc import USRNet, zero_udr


def uses_aude(variant: str) -> bool:
    return variant in (VARIANT_FULL, VARIANT_NO_AIS)


def uses_ais(variant: str) -> bool:
    return variant in (VARIANT_FULL, VARIANT_NO_AUDE)


class USRModel(Module):
    """
    Degradation extractor ("de.*") and super-resolution network ("sr.*").

    Variants without the extractor feed a zero representation; variants
    without AIS pin every gamma to 1.
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.variant = cfg.variant
        self.de = AUDE(cfg.de)
        self.sr = USRNet(replace(cfg.sr, ais_enabled=cfg.sr.ais_enabled and uses_ais(cfg.variant)))
        self.assign_names()

    @classmethod
    def initialized(cls, cfg: TrainConfig) -> 'USRModel':
        model = cls(cfg)
        initialize(model, cfg.seed)
        return model

    def udr(self, lr) -> Tensor:
        if not uses_aude(self.variant):
            return zero_udr(self.sr.cfg)
        return infer_udr(lr, self.de.extractor, self.de.contrast)

    def forward(self, lr, udr: Tensor = None) -> Tensor:
        """
        ``udr`` defaults to the representation of ``lr`` itself; training
        passes the one inferred from the whole image a crop was taken from
        """
        return self.sr(lr, self.udr(lr) if udr is None else udr)

    def super_resolve(self, lr: ImageBuffer) -> ImageBuffer:
        with no_grad():
            return ImageBuffer.from_tensor(self.forward(lr))

    def representation(self, lr: ImageBuffer) -> np.ndarray:
        with no_grad():
            return self.udr(lr).data.copy()
