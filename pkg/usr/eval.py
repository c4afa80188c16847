"""
Quality metrics and representation diagnostics
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage
from twisted.logger import Logger

from usr.constants import PSNR_CAP, VARIANTS
from usr.config import TrainConfig
from usr.degrade import Sample, bicubic_upsample, worker_count
from usr.errors import DataError, DimensionError, ParameterError
from usr.imageio import ImageBuffer
from usr.model import USRModel
from usr.rng import DeterministicRng, StreamKey
from usr.train import train_all

log = Logger('eval')

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MSE_FLOOR = 1e-12
LUMA = np.array([0.299, 0.587, 0.114])


def _pixels(img) -> np.ndarray:
    return img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise DimensionError(f'psnr: images differ in shape, {a.shape} vs {b.shape}')
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def luma(img) -> np.ndarray:
    data = _pixels(img)
    if data.ndim == 2:
        return data
    if data.shape[0] == 1:
        return data[0]
    return np.tensordot(LUMA, data, axes=1)


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """
    Mean structural similarity of the BT.601 luma over all fully covered 11x11 windows
    """
    x, y = luma(a), luma(b)
    if x.shape != y.shape:
        raise DimensionError(f'ssim: images differ in shape, {x.shape} vs {y.shape}')
    if min(x.shape) < SSIM_WINDOW:
        raise DataError(f'ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}')
    w = _gaussian_window()
    r = SSIM_WINDOW // 2

    def filt(z):
        return ndimage.correlate(z, w, mode='constant')[r:-r, r:-r]

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# -- quality -----------------------------------------------------------------------


@dataclass
class QualityRow:
    image: str
    psnr_db: float
    ssim: float
    mode: str = ''


@dataclass
class QualityReport:
    rows: list[QualityRow] = field(default_factory=list)
    baseline: list[QualityRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(r.psnr_db for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self) -> float:
        return math.fsum(r.ssim for r in self.rows) / len(self.rows)

    @property
    def baseline_psnr(self) -> float | None:
        return math.fsum(r.psnr_db for r in self.baseline) / len(self.baseline) if self.baseline else None

    def by_mode(self) -> dict[str, tuple[float, float, int]]:
        """
        mode -> (mean psnr, mean ssim, count)
        """
        groups: dict[str, list[QualityRow]] = {}
        for r in self.rows:
            groups.setdefault(r.mode or '-', []).append(r)
        return {m: (math.fsum(r.psnr_db for r in rs) / len(rs), math.fsum(r.ssim for r in rs) / len(rs), len(rs))
                for m, rs in sorted(groups.items())}


def _parallel(fn, items: list, threads: int = None) -> list:
    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        return list(pool.map(fn, items))


def evaluate_quality(model: USRModel, samples: list[Sample], baseline: bool = True,
                     threads: int = None) -> QualityReport:
    if not samples:
        raise DataError('nothing to evaluate')
    scale = model.sr.cfg.scale

    def score(sample: Sample) -> tuple[QualityRow, QualityRow]:
        mode = sample.record.mode if sample.record else ''
        hr = sample.hr.to_rgb()
        sr = model.super_resolve(sample.lr)
        row = QualityRow(sample.name, psnr(sr, hr), ssim(sr, hr), mode)
        base = bicubic_upsample(sample.lr.to_rgb(), scale) if baseline else None
        return row, QualityRow(sample.name, psnr(base, hr), ssim(base, hr), mode) if base is not None else None

    scored = _parallel(score, samples, threads)
    report = QualityReport([r for r, _ in scored], [b for _, b in scored if b is not None])
    log.info('quality over {n} images: {psnr:.3f} dB / {ssim:.4f}', n=len(samples), psnr=report.mean_psnr,
             ssim=report.mean_ssim)
    return report


# -- stability ---------------------------------------------------------------------


@dataclass
class ImageStability:
    image: str
    mean: np.ndarray
    variance: np.ndarray

    @property
    def instability(self) -> float:
        return float(self.variance.mean())

    @property
    def dims(self) -> int:
        return self.mean.shape[0]


@dataclass
class StabilityReport:
    images: list[ImageStability] = field(default_factory=list)

    @property
    def score(self) -> float:
        return math.fsum(i.instability for i in self.images) / len(self.images)


def stability_metric(represent: Callable[[ImageBuffer], np.ndarray], image: ImageBuffer, n_patches: int,
                     patch: int, rng: DeterministicRng, name: str = '') -> ImageStability:
    """
    Per-dimension mean and variance of the representations of ``n_patches``
    random crops of one image. ``represent`` maps a crop to its representation
    (``USRModel.representation`` for a trained model).
    """
    if n_patches < 2:
        raise ParameterError(f'stability needs at least 2 patches, got {n_patches}')
    if image.height < patch or image.width < patch:
        raise DataError(f'image {image.height}x{image.width} smaller than patch {patch}')
    udrs = []
    for _ in range(n_patches):
        top, left = rng.randint(0, image.height - patch), rng.randint(0, image.width - patch)
        udrs.append(np.asarray(represent(image.crop(top, left, patch, patch)), dtype=np.float64))
    udrs = np.stack(udrs)
    return ImageStability(name, udrs.mean(axis=0), udrs.var(axis=0))


def stability_report(represent, images: list[tuple[str, ImageBuffer]], n_patches: int, patch: int,
                     seed: int) -> StabilityReport:
    """
    Image ``i`` draws its crops from the stream (seed, i, "stability")
    """
    return StabilityReport([stability_metric(represent, img, n_patches, patch,
                                             DeterministicRng(StreamKey(seed, i, 'stability')), name)
                            for i, (name, img) in enumerate(images)])


# -- clustering --------------------------------------------------------------------


@dataclass
class ClusterReport:
    udrs: np.ndarray
    labels: list[str]
    coords: np.ndarray
    silhouettes: np.ndarray
    silhouette: float


def silhouette_samples(x: np.ndarray, labels: list[str]) -> np.ndarray:
    """
    Per-point silhouette with euclidean distances; singleton clusters score 0
    """
    labels = np.asarray(labels)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    names = sorted(set(labels.tolist()))
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() < 2:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == other].mean() for other in names if other != labels[i])
        top = max(a, b)
        s[i] = (b - a) / top if top > 0 else 0.0
    return s


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    nonzero = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nonzero.size and v[nonzero[0]] < 0 else v


def pca_2d(x: np.ndarray, iterations: int = 1000, tol: float = 1e-12) -> np.ndarray:
    """
    Projection on the two leading principal axes found by power iteration with deflation.

    An axis whose remaining variance is below ``tol`` times the total is
    reported as zero, so rank-deficient input gives zero columns.
    """
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x), 1)
    total = float(np.trace(cov))
    axes = []
    for _ in range(min(2, x.shape[1])):
        if total <= 0.0 or np.abs(cov).max() <= tol * total:
            axes.append(np.zeros(x.shape[1]))
            continue
        v = cov[:, int(np.argmax(np.diag(cov)))].copy()
        for _ in range(iterations):
            for a in axes:
                v = v - (v @ a) * a
            norm = np.linalg.norm(v)
            if norm == 0.0:
                break
            v = v / norm
            w = cov @ v
            done = np.linalg.norm(w / max(np.linalg.norm(w), 1e-300) - v) < tol
            v = w
            if done:
                break
        for a in axes:
            v = v - (v @ a) * a
        norm = np.linalg.norm(v)
        v = _sign_normalize(v / norm) if norm > 0.0 else np.zeros(x.shape[1])
        axes.append(v)
        cov = cov - (v @ cov @ v) * np.outer(v, v)
    while len(axes) < 2:
        axes.append(np.zeros(x.shape[1]))
    return xc @ np.stack(axes, axis=1)


def cluster_separability(samples: list[tuple[np.ndarray, str]]) -> ClusterReport:
    labels = [label for _, label in samples]
    if len(set(labels)) < 2:
        raise DataError('cluster analysis needs at least two labels')
    x = np.stack([np.asarray(u, dtype=np.float64) for u, _ in samples])
    if np.all(x == x[0]):
        log.warn('all {n} representations are identical, silhouette defined as 0', n=len(x))
        s = np.zeros(len(x))
    else:
        s = silhouette_samples(x, labels)
    return ClusterReport(x, labels, pca_2d(x), s, float(math.fsum(s) / len(s)))


def cluster_model(model: USRModel, samples: list[Sample], threads: int = None) -> ClusterReport:
    """
    Representations of whole LR images labelled by their degradation mode
    """
    if any(s.record is None for s in samples):
        raise DataError('cluster analysis needs degradation records for every image')
    udrs = _parallel(lambda s: model.representation(s.lr), samples, threads)
    return cluster_separability([(u, s.record.mode) for u, s in zip(udrs, samples)])


# -- ablation ----------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    n_vddc: int
    psnr_db: float
    ssim: float


def ablation_run(variants: list[str], cfg: TrainConfig, data: list[Sample], heldout: list[Sample],
                 n_vddc: list[int] = None, threads: int = None) -> list[AblationRow]:
    """
    Train every (variant, depth) combination with the same seed, data and
    budget, and score each on the held-out pairs
    """
    for v in variants:
        if v not in VARIANTS:
            raise ParameterError(f'unknown variant "{v}", expected one of {VARIANTS}')
    rows = []
    for depth in n_vddc or [cfg.sr.n_vddc]:
        for variant in variants:
            run_cfg = replace(cfg, variant=variant, sr=replace(cfg.sr, n_vddc=depth))
            model = USRModel(run_cfg)
            train_all(run_cfg, data)[0].apply_to(model)
            report = evaluate_quality(model, heldout, baseline=False, threads=threads)
            rows.append(AblationRow(variant, depth, report.mean_psnr, report.mean_ssim))
            log.info('ablation {variant} n_vddc={n}: {psnr:.3f} dB / {ssim:.4f}', variant=variant, n=depth,
                     psnr=report.mean_psnr, ssim=report.mean_ssim)
    return rows
