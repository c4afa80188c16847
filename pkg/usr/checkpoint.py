"""
"USRC" binary checkpoints

    magic "USRC" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | dtype u8 (0 f32, 1 f64) | ndim u8 | dims u32 each | payload
    CRC32 (IEEE) of everything between the magic and the CRC, u32

All integers and payloads are little-endian, payloads row-major. Optimizer
state travels as ordinary entries under the "adam/" prefix.
"""
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from os import makedirs
from os.path import dirname, isfile

import numpy as np
from twisted.logger import Logger

from usr.errors import CheckpointError, CorruptCheckpointError, IncompatibleCheckpointError
from usr.nn import Module
from usr.optim import AdamState

MAGIC = b'USRC'
VERSION = 1
DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
OPTIM_PREFIX = 'adam/'

log = Logger('checkpoint')


@dataclass
class Checkpoint:
    params: 'OrderedDict[str, np.ndarray]' = field(default_factory=OrderedDict)
    optimizer: AdamState | None = None
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Module, optimizer: AdamState = None) -> 'Checkpoint':
        if optimizer is not None:
            # adam_step rebinds m and v entries, never writes into them
            optimizer = replace(optimizer, m=dict(optimizer.m), v=dict(optimizer.v))
        return cls(model.state_dict(), optimizer)

    def apply_to(self, model: Module):
        model.load_state_dict(self.params)

    def entries(self) -> 'OrderedDict[str, np.ndarray]':
        table = OrderedDict(self.params)
        if self.optimizer is not None:
            s = self.optimizer
            table[f'{OPTIM_PREFIX}step'] = np.array([float(s.step)])
            table[f'{OPTIM_PREFIX}hyper'] = np.array([s.lr, s.beta1, s.beta2, s.eps])
            for name in s.m:
                table[f'{OPTIM_PREFIX}m/{name}'] = s.m[name]
                table[f'{OPTIM_PREFIX}v/{name}'] = s.v[name]
        return table

    def to_bytes(self) -> bytes:
        entries = self.entries()
        body = [struct.pack('<II', self.version, len(entries))]
        for name, array in entries.items():
            array = np.asarray(array)
            if array.dtype not in DTYPE_CODES:
                array = array.astype(np.float64)
            encoded = name.encode('utf-8')
            body.append(struct.pack('<H', len(encoded)))
            body.append(encoded)
            body.append(struct.pack('<BB', DTYPE_CODES[array.dtype], array.ndim))
            body.append(struct.pack(f'<{array.ndim}I', *array.shape))
            body.append(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')).tobytes())
        payload = b''.join(body)
        return MAGIC + payload + struct.pack('<I', zlib.crc32(payload) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = '<bytes>') -> 'Checkpoint':
        if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
            raise CorruptCheckpointError(f'not a USRC checkpoint: "{source}"')
        payload, (crc,) = raw[len(MAGIC):-4], struct.unpack('<I', raw[-4:])
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CorruptCheckpointError(f'checkpoint CRC mismatch, file truncated or damaged: "{source}"')
        version, count = struct.unpack_from('<II', payload, 0)
        if version != VERSION:
            raise IncompatibleCheckpointError(f'unsupported checkpoint version {version}: "{source}"')
        pos, table = 8, OrderedDict()
        try:
            for _ in range(count):
                (length,) = struct.unpack_from('<H', payload, pos)
                pos += 2
                name = payload[pos:pos + length].decode('utf-8')
                pos += length
                code, ndim = struct.unpack_from('<BB', payload, pos)
                pos += 2
                shape = struct.unpack_from(f'<{ndim}I', payload, pos)
                pos += 4 * ndim
                dtype = DTYPES[code]
                size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                if pos + size > len(payload):
                    raise CorruptCheckpointError(f'entry "{name}" runs past the end of "{source}"')
                table[name] = np.frombuffer(payload, dtype=dtype, count=size // dtype.itemsize,
                                            offset=pos).reshape(shape).astype(dtype.newbyteorder('='))
                pos += size
        except (struct.error, KeyError, UnicodeDecodeError) as e:
            raise CorruptCheckpointError(f'malformed checkpoint entry in "{source}": {e}')
        if pos != len(payload):
            raise CorruptCheckpointError(f'{len(payload) - pos} trailing bytes in "{source}"')
        return cls._split(table, version)

    @classmethod
    def _split(cls, table: dict, version: int) -> 'Checkpoint':
        params = OrderedDict((k, v) for k, v in table.items() if not k.startswith(OPTIM_PREFIX))
        optimizer = None
        if f'{OPTIM_PREFIX}step' in table:
            lr, beta1, beta2, eps = (float(x) for x in table[f'{OPTIM_PREFIX}hyper'])
            optimizer = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                  step=int(table[f'{OPTIM_PREFIX}step'][0]))
            m_prefix, v_prefix = f'{OPTIM_PREFIX}m/', f'{OPTIM_PREFIX}v/'
            for k, v in table.items():
                if k.startswith(m_prefix):
                    optimizer.m[k[len(m_prefix):]] = v
                elif k.startswith(v_prefix):
                    optimizer.v[k[len(v_prefix):]] = v
        return cls(params, optimizer, version)


def save_checkpoint(model: Module | Checkpoint, path: str, optimizer: AdamState = None) -> Checkpoint:
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(model, optimizer)
    folder = dirname(path)
    if folder:
        makedirs(folder, exist_ok=True)
    try:
        with open(path, 'wb') as fp:
            fp.write(ckpt.to_bytes())
    except OSError as e:
        raise CheckpointError(f'cannot write checkpoint "{path}": {e.strerror}')
    log.info('saved {count} tensors to {path}', count=len(ckpt.params), path=path)
    return ckpt


def load_checkpoint(path: str, model: Module = None) -> Checkpoint:
    """
    Read and verify ``path``; when ``model`` is given its parameters are
    replaced, which only happens after the whole file has been validated.
    """
    if not isfile(path):
        raise CheckpointError(f'checkpoint not found: "{path}"')
    try:
        with open(path, 'rb') as fp:
            raw = fp.read()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint "{path}": {e.strerror}')
    ckpt = Checkpoint.from_bytes(raw, path)
    if model is not None:
        ckpt.apply_to(model)
    log.debug('loaded {count} tensors from {path}', count=len(ckpt.params), path=path)
    return ckpt
