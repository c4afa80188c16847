"""
Pixel-domain JPEG simulation: colour transform, 8x8 block DCT, quantization
and reconstruction. No entropy coding; the decoded pixels are what a baseline
codec would produce before 8-bit rounding.
"""
import numpy as np
from scipy.fft import dctn, idctn

from usr.errors import ParameterError
from usr.imageio import ImageBuffer

BLOCK = 8
QUALITY_MIN = 5
QUALITY_MAX = 100

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quality_scale(quality: int) -> int:
    """
    libjpeg quality -> percentage scale
    """
    if not QUALITY_MIN <= quality <= QUALITY_MAX or int(quality) != quality:
        raise ParameterError(f'jpeg quality must be an integer in [{QUALITY_MIN}, {QUALITY_MAX}], got {quality}')
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quantization_table(quality: int, chroma: bool = False) -> np.ndarray:
    base = CHROMA_TABLE if chroma else LUMA_TABLE
    scale = quality_scale(quality)
    return np.maximum(np.floor((base * scale + 50) / 100), 1.0)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """
    BT.601 full range, inputs and outputs on the 0..255 scale
    """
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def block_roundtrip(blocks: np.ndarray, table: np.ndarray) -> np.ndarray:
    """
    DCT-II, quantize, dequantize and inverse DCT over the last two (8 x 8) axes.

    ``blocks`` are level-shifted samples (value - 128).
    """
    coef = dctn(blocks, axes=(-2, -1), norm='ortho')
    coef = round_half_away(coef / table) * table
    return idctn(coef, axes=(-2, -1), norm='ortho')


def _plane_roundtrip(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    blocks = plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    out = block_roundtrip(blocks - 128.0, table) + 128.0
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_degrade(img: ImageBuffer, quality: int, subsample_chroma: bool = False) -> ImageBuffer:
    """
    Simulated JPEG round trip.

    The image is replicate-padded to a multiple of 8 (16 with 4:2:0 chroma
    subsampling) and cropped back afterwards. Gray images skip the colour
    transform.
    """
    luma_q = quantization_table(quality)
    chroma_q = quantization_table(quality, chroma=True)
    c, h, w = img.shape
    unit = 2 * BLOCK if subsample_chroma and c == 3 else BLOCK
    ph, pw = -h % unit, -w % unit
    data = np.pad(img.data * 255.0, ((0, 0), (0, ph), (0, pw)), mode='edge')

    if c == 1:
        out = _plane_roundtrip(data[0], luma_q)[None]
    else:
        ycc = rgb_to_ycbcr(data)
        y = _plane_roundtrip(ycc[0], luma_q)
        if subsample_chroma:
            hh, ww = ycc.shape[1] // 2, ycc.shape[2] // 2
            chroma = [ycc[i].reshape(hh, 2, ww, 2).mean(axis=(1, 3)) for i in (1, 2)]
            chroma = [np.repeat(np.repeat(_plane_roundtrip(p, chroma_q), 2, axis=0), 2, axis=1) for p in chroma]
        else:
            chroma = [_plane_roundtrip(ycc[i], chroma_q) for i in (1, 2)]
        out = ycbcr_to_rgb(np.stack([y, *chroma]))

    return ImageBuffer(np.clip(out[:, :h, :w] / 255.0, 0.0, 1.0))
