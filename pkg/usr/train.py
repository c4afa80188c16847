"""
Three-stage training

    1. extractor and SR network jointly, MSE on HR patches
    2. extractor and alpha head alone, uncertainty suppression loss on LR patch pairs
    3. everything, L1 on HR patches

Every random choice (batch images, crop offsets, reparameterization noise)
comes from a stream keyed by (seed, global step, purpose), so a run is a
deterministic function of its configuration.
"""
import csv
import io
import math

import numpy as np
from twisted.logger import Logger

from usr.aude import MIN_PATCH, CollapseMonitor, sample_patch_pair, de_forward, us_loss, draw_noise
from usr.autograd import Tensor
from usr.checkpoint import Checkpoint
from usr.config import TrainConfig
from usr.degrade import Sample
from usr.errors import DataError, NumericError, TrainingAborted
from usr.model import USRModel, uses_aude
from usr.ops import reconstruction_loss
from usr.optim import Adam
from usr.rng import DeterministicRng, StreamKey

METRICS_HEADER = ('step', 'stage', 'loss', 'l_rec', 'l_u', 'l_ur', 'alpha1', 'alpha2', 'mean_logvar',
                  'mu_norm', 'grad_norm')
STAGE_LOSSES = {1: 'mse', 3: 'l1'}


class MetricsLog:
    """
    One row per optimisation step; empty cells where a column does not apply
    """

    def __init__(self):
        self.records: list[dict] = []

    def append(self, record: dict):
        if self.records and record['step'] <= self.records[-1]['step']:
            raise ValueError(f'step {record["step"]} does not follow {self.records[-1]["step"]}')
        self.records.append(record)

    @property
    def last_step(self) -> int:
        return self.records[-1]['step'] if self.records else 0

    def stage(self, stage: int) -> list[dict]:
        return [r for r in self.records if r['stage'] == stage]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(METRICS_HEADER)
        for r in self.records:
            writer.writerow(['' if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]
                             for k in METRICS_HEADER])
        return out.getvalue()

    def save(self, path: str):
        with open(path, 'w', newline='') as fp:
            fp.write(self.to_csv())


def crop_pair(sample: Sample, patch: int, scale: int, rng: DeterministicRng) -> tuple[Tensor, Tensor]:
    """
    Aligned LR patch and the HR patch it was degraded from
    """
    lr, hr = sample.lr, sample.hr
    if lr.height < patch or lr.width < patch:
        raise DataError(f'LR image "{sample.name}" ({lr.height}x{lr.width}) smaller than patch {patch}')
    if hr.height != lr.height * scale or hr.width != lr.width * scale:
        raise DataError(f'HR image "{sample.name}" is not {scale}x its LR image')
    top, left = rng.randint(0, lr.height - patch), rng.randint(0, lr.width - patch)
    lr_patch = lr.to_rgb().crop(top, left, patch, patch)
    hr_patch = hr.to_rgb().crop(top * scale, left * scale, patch * scale, patch * scale)
    return lr_patch.tensor(), hr_patch.tensor()


class Trainer:
    """
    Runs the stages on one model in place, keeping a MetricsLog across stages
    """
    log = Logger('Trainer')

    def __init__(self, cfg: TrainConfig, data: list[Sample], model: USRModel = None):
        if not data:
            raise DataError('training needs at least one image pair')
        self.cfg = cfg
        self.data = data
        self.model = model or USRModel.initialized(cfg)
        if uses_aude(self.model.variant):
            for s in data:
                if min(s.lr.height, s.lr.width) < MIN_PATCH:
                    raise DataError(f'LR image "{s.name}" ({s.lr.height}x{s.lr.width}) is smaller than the '
                                    f'{MIN_PATCH}x{MIN_PATCH} the degradation extractor needs')
        self.metrics = MetricsLog()
        self.monitor = CollapseMonitor(cfg.collapse_window)

    def _patch_size(self, requested: int, window: int) -> int:
        smallest = min(min(s.lr.height, s.lr.width) for s in self.data)
        patch = min(requested, smallest)
        if patch < window:
            raise DataError(f'training patch {patch} is smaller than the attention window {window}')
        return patch - patch % window

    def _optimizer(self, stage: int, params) -> Adam:
        cfg = self.cfg
        return Adam(params, cfg.lr[stage - 1], cfg.beta1, cfg.beta2, cfg.eps)

    def _rng(self, step: int, purpose: str) -> DeterministicRng:
        return DeterministicRng(StreamKey(self.cfg.seed, step, purpose))

    def _step(self, stage: int, optimizer: Adam, compute) -> dict:
        """
        One update; a non-finite value anywhere aborts with the last good checkpoint
        """
        step = self.metrics.last_step + 1
        snapshot = Checkpoint.from_model(self.model, optimizer.state)
        optimizer.zero_grad()
        try:
            loss, record = compute(step)
            if not math.isfinite(loss.item()):
                raise NumericError(f'non-finite loss at step {step}')
            loss.backward()
            grad_norm = optimizer.grad_norm()
            optimizer.step()
        except NumericError as e:
            self.log.error('stage {stage} aborted at step {step}: {err}', stage=stage, step=step, err=e)
            raise TrainingAborted(f'stage {stage} aborted at step {step}: {e}', snapshot, step)
        record.update(step=step, stage=stage, loss=loss.item(), grad_norm=grad_norm)
        self.metrics.append(record)
        self.log.debug('stage {stage} step {step}: loss={loss:.6g} l_u={l_u} l_ur={l_ur} alpha1={alpha1} '
                       'alpha2={alpha2} mean_logvar={mean_logvar}',
                       **{k: record.get(k) for k in ('stage', 'step', 'loss', 'l_u', 'l_ur', 'alpha1', 'alpha2',
                                                      'mean_logvar')})
        return record

    def _reconstruction_stage(self, stage: int) -> Checkpoint:
        cfg, model = self.cfg, self.model
        scale = model.sr.cfg.scale
        patch = self._patch_size(cfg.lr_patch, model.sr.cfg.window)
        optimizer = self._optimizer(stage, model.parameters())
        kind = STAGE_LOSSES[stage]

        def compute(step):
            rng = self._rng(step, f'stage{stage}:batch')
            total = None
            for _ in range(cfg.batch):
                sample = self.data[rng.randint(0, len(self.data) - 1)]
                lr, hr = crop_pair(sample, patch, scale, rng)
                # the representation comes from the whole LR image, the crop only feeds the SR network
                udr = model.udr(sample.lr.to_rgb())
                loss = reconstruction_loss(kind, model(lr, udr), hr)
                total = loss if total is None else total + loss
            total = total * (1.0 / cfg.batch)
            return total, {'l_rec': total.item()}

        for _ in range(cfg.steps[stage - 1]):
            self._step(stage, optimizer, compute)
        self.log.info('stage {stage} done: {steps} steps, patch {patch}', stage=stage,
                      steps=cfg.steps[stage - 1], patch=patch)
        return Checkpoint.from_model(model, optimizer.state)

    def stage1(self) -> Checkpoint:
        return self._reconstruction_stage(1)

    def stage2(self) -> Checkpoint:
        """
        Only the extractor and its alpha head are updated
        """
        cfg, model = self.cfg, self.model
        if not uses_aude(model.variant):
            self.log.info('variant {variant} has no extractor, stage 2 skipped', variant=model.variant)
            return Checkpoint.from_model(model)
        patch = min(cfg.pair_patch, *(min(s.lr.height, s.lr.width) for s in self.data))
        if patch < MIN_PATCH:
            raise DataError(f'pair patch {patch} is smaller than the {MIN_PATCH}x{MIN_PATCH} the degradation '
                            f'extractor needs')
        optimizer = self._optimizer(2, model.de.parameters())
        d = model.de.udr_dim

        def compute(step):
            rng = self._rng(step, 'stage2:pairs')
            noise = self._rng(step, 'stage2:z')
            total = l_u_sum = l_ur_sum = None
            stats = []
            for _ in range(cfg.batch):
                sample = self.data[rng.randint(0, len(self.data) - 1)]
                pair = sample_patch_pair(sample.lr.to_rgb(), patch, rng)
                s1 = de_forward(pair.x1, model.de.extractor, model.de.contrast)
                s2 = de_forward(pair.x2, model.de.extractor, model.de.contrast)
                z1 = draw_noise(noise, d, cfg.loss.num_samples)
                z2 = draw_noise(noise, d, cfg.loss.num_samples)
                loss, l_u, l_ur = us_loss(s1, s2, z1, z2, cfg.loss)
                total = loss if total is None else total + loss
                l_u_sum = l_u.item() + (l_u_sum or 0.0)
                l_ur_sum = l_ur.item() + (l_ur_sum or 0.0)
                stats.append((s1, s2))
            total = total * (1.0 / cfg.batch)
            alpha1 = float(np.mean([s1.alpha.item() for s1, _ in stats]))
            alpha2 = float(np.mean([s2.alpha.item() for _, s2 in stats]))
            logvar = float(np.mean([s.logvar.data.mean() for pair in stats for s in pair]))
            mu_norm = float(np.mean([np.linalg.norm(s.mu.data) for pair in stats for s in pair]))
            self.monitor.update(step, alpha1, alpha2, logvar)
            return total, {'l_u': l_u_sum / cfg.batch, 'l_ur': l_ur_sum / cfg.batch, 'alpha1': alpha1,
                           'alpha2': alpha2, 'mean_logvar': logvar, 'mu_norm': mu_norm}

        for _ in range(cfg.steps[1]):
            self._step(2, optimizer, compute)
        self.log.info('stage 2 done: {steps} steps, pair patch {patch}, collapse flags {flags}',
                      steps=cfg.steps[1], patch=patch, flags=self.monitor.flagged)
        return Checkpoint.from_model(model, optimizer.state)

    def stage3(self) -> Checkpoint:
        return self._reconstruction_stage(3)

    def run(self, stage: int) -> Checkpoint:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[stage]()

    def run_all(self) -> Checkpoint:
        ckpt = None
        for stage in (1, 2, 3):
            ckpt = self.run(stage)
        return ckpt


def _trainer(cfg: TrainConfig, data: list[Sample], ckpt: Checkpoint = None) -> Trainer:
    model = USRModel.initialized(cfg)
    if ckpt is not None:
        ckpt.apply_to(model)
    return Trainer(cfg, data, model)


def train_stage1(cfg: TrainConfig, data: list[Sample], ckpt: Checkpoint = None) -> Checkpoint:
    return _trainer(cfg, data, ckpt).stage1()


def train_stage2(cfg: TrainConfig, ckpt: Checkpoint, data: list[Sample]) -> Checkpoint:
    return _trainer(cfg, data, ckpt).stage2()


def train_stage3(cfg: TrainConfig, ckpt: Checkpoint, data: list[Sample]) -> Checkpoint:
    return _trainer(cfg, data, ckpt).stage3()


def train_all(cfg: TrainConfig, data: list[Sample]) -> tuple[Checkpoint, MetricsLog]:
    trainer = Trainer(cfg, data)
    return trainer.run_all(), trainer.metrics
