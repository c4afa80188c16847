"""
Planar float images and binary PPM (P6) files
"""
import re
from dataclasses import dataclass
from os import makedirs
from os.path import dirname

import numpy as np

from usr.autograd import Tensor
from usr.errors import DataError, DimensionError

PPM_MAGIC = b'P6'
PPM_MAXVAL = 255
_TOKEN = re.compile(rb'\s*(?:#[^\n]*\n\s*)*(\S+)')


@dataclass
class ImageBuffer:
    """
    C x H x W values in [0, 1], C = 3 (RGB) or 1 (gray)
    """
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] not in (1, 3):
            raise DimensionError(f'image must be 1xHxW or 3xHxW, got {self.data.shape}')
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise DimensionError(f'image has an empty dimension: {self.data.shape}')

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def crop(self, top: int, left: int, height: int, width: int) -> 'ImageBuffer':
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise DataError(f'crop {height}x{width} at ({top}, {left}) exceeds {self.height}x{self.width}')
        return ImageBuffer(self.data[:, top:top + height, left:left + width].copy())

    def clamped(self) -> 'ImageBuffer':
        return ImageBuffer(np.clip(self.data, 0.0, 1.0))

    def to_rgb(self) -> 'ImageBuffer':
        return self if self.channels == 3 else ImageBuffer(np.repeat(self.data, 3, axis=0))

    def tensor(self) -> Tensor:
        return Tensor(self.data)

    @classmethod
    def from_tensor(cls, t: Tensor, clamp: bool = True) -> 'ImageBuffer':
        data = t.data.copy()
        return cls(np.clip(data, 0.0, 1.0) if clamp else data)


def _header(raw: bytes, path: str) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        match = _TOKEN.match(raw, pos)
        if match is None:
            raise DataError(f'malformed PPM header: "{path}"')
        tokens.append(match.group(1))
        pos = match.end()
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(raw) or raw[pos:pos + 1] not in (b' ', b'\t', b'\n', b'\r'):
        raise DataError(f'malformed PPM header: "{path}"')
    return tokens, pos + 1


def decode_ppm(raw: bytes, path: str = '<bytes>') -> ImageBuffer:
    tokens, offset = _header(raw, path)
    if tokens[0] != PPM_MAGIC:
        raise DataError(f'not a binary PPM (P6) file: "{path}"')
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f'malformed PPM header: "{path}"')
    if maxval != PPM_MAXVAL:
        raise DataError(f'unsupported PPM maxval {maxval} (only 255): "{path}"')
    if width < 1 or height < 1:
        raise DataError(f'PPM has an empty dimension {width}x{height}: "{path}"')
    expected = width * height * 3
    raster = raw[offset:offset + expected]
    if len(raster) != expected:
        raise DataError(f'PPM raster truncated, {len(raster)} of {expected} bytes: "{path}"')
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(pixels.transpose(2, 0, 1).astype(np.float64) / 255.0)


def encode_ppm(img: ImageBuffer) -> bytes:
    rgb = img.to_rgb().data
    pixels = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f'P6\n{img.width} {img.height}\n{PPM_MAXVAL}\n'.encode('ascii')
    return header + pixels.transpose(1, 2, 0).tobytes()


def read_ppm(path: str) -> ImageBuffer:
    try:
        with open(path, 'rb') as fp:
            raw = fp.read()
    except OSError as e:
        raise DataError(f'cannot read image "{path}": {e.strerror}')
    return decode_ppm(raw, path)


def write_ppm(img: ImageBuffer, path: str):
    folder = dirname(path)
    if folder:
        makedirs(folder, exist_ok=True)
    try:
        with open(path, 'wb') as fp:
            fp.write(encode_ppm(img))
    except OSError as e:
        raise DataError(f'cannot write image "{path}": {e.strerror}')
