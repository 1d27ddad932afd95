"""
Self-describing model checkpoints.

Layout (little-endian):

    magic b'CDCK' | version u16 | config length u32 | config text (utf-8) | tensor count u32
    per tensor: name length u16 | name | dtype code u8 | ndim u8 | shape u32 * ndim | byte count u64 | raw bytes | crc32 u32

Tensors are written in state_dict order and the config snapshot is the RunConfig text, so the same
model and config always serialize to the same bytes.
"""

import os
import struct
import zlib
from collections import OrderedDict
from typing import Tuple

import numpy as np
import torch

from condiff.constants import *
from condiff.utils import log

PREAMBLE = struct.Struct('<4sHI')
COUNT = struct.Struct('<I')
NAME_LENGTH = struct.Struct('<H')
TENSOR_INFO = struct.Struct('<BB')
DIM = struct.Struct('<I')
NBYTES = struct.Struct('<Q')
CHECKSUM = struct.Struct('<I')

_NUMPY_DTYPES = {
    'float32': '<f4',
    'float64': '<f8',
    'int64': '<i8',
    'uint8': 'u1',
    'int32': '<i4',
    'bool': '?',
}
_CODE_NAMES = {code: name for name, code in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    '''Malformed checkpoint, or a checkpoint that does not fit the configured model'''


def _dtype_name(tensor: torch.Tensor) -> str:
    name = str(tensor.dtype).replace('torch.', '')
    if name not in DTYPE_CODES:
        raise CheckpointError(f'Unsupported tensor dtype {tensor.dtype}')
    return name


def checkpoint_bytes(state_dict, config_text: str) -> bytes:
    config_bytes = config_text.encode('utf-8')
    chunks = [PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_bytes)), config_bytes,
              COUNT.pack(len(state_dict))]
    for name, tensor in state_dict.items():
        dtype = _dtype_name(tensor)
        raw = tensor.detach().cpu().contiguous().numpy().astype(_NUMPY_DTYPES[dtype]).tobytes()
        name_bytes = name.encode('utf-8')
        chunks.append(NAME_LENGTH.pack(len(name_bytes)) + name_bytes)
        chunks.append(TENSOR_INFO.pack(DTYPE_CODES[dtype], tensor.dim()))
        chunks.extend(DIM.pack(size) for size in tensor.shape)
        chunks.append(NBYTES.pack(len(raw)) + raw + CHECKSUM.pack(zlib.crc32(raw)))
    return b''.join(chunks)


def save_checkpoint(model: torch.nn.Module, config, path: str) -> str:
    '''Write the model parameters and buffers with the RunConfig snapshot; returns the path'''
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(checkpoint_bytes(model.state_dict(), config.to_text()))
    log(f'checkpoint written to {path}')
    return path


class _Reader:

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f'{self.path}: truncated while reading {what}')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct, what: str):
        return layout.unpack(self.take(layout.size, what))


def load_checkpoint(path: str) -> Tuple[str, 'OrderedDict[str, torch.Tensor]']:
    """
    Read a checkpoint; returns the config text and the named tensors in stored order.
    """
    with open(path, 'rb') as handle:
        reader = _Reader(handle.read(), path)
    magic, version, config_length = reader.unpack(PREAMBLE, 'header')
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path}: unsupported version {version}, expected {CHECKPOINT_VERSION}')
    config_text = reader.take(config_length, 'config snapshot').decode('utf-8')
    (count,) = reader.unpack(COUNT, 'tensor count')

    tensors = OrderedDict()
    for index in range(count):
        (name_length,) = reader.unpack(NAME_LENGTH, f'tensor {index} name')
        name = reader.take(name_length, f'tensor {index} name').decode('utf-8')
        code, ndim = reader.unpack(TENSOR_INFO, f'tensor {name}')
        if code not in _CODE_NAMES:
            raise CheckpointError(f'{path}: tensor {name} has unknown dtype code {code}')
        shape = tuple(reader.unpack(DIM, f'tensor {name} shape')[0] for _ in range(ndim))
        (nbytes,) = reader.unpack(NBYTES, f'tensor {name} size')
        raw = reader.take(nbytes, f'tensor {name} data')
        (checksum,) = reader.unpack(CHECKSUM, f'tensor {name} checksum')
        if zlib.crc32(raw) != checksum:
            raise CheckpointError(f'{path}: checksum mismatch in tensor {name}')
        dtype = np.dtype(_NUMPY_DTYPES[_CODE_NAMES[code]])
        if dtype.itemsize * int(np.prod(shape, dtype=np.int64)) != nbytes:
            raise CheckpointError(f'{path}: tensor {name} holds {nbytes} bytes for shape {shape}')
        array = np.frombuffer(raw, dtype=dtype).reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(dtype.newbyteorder('=')))
    if reader.offset != len(reader.data):
        raise CheckpointError(f'{path}: {len(reader.data) - reader.offset} trailing bytes')
    log(f'{count} tensors read from {path}')
    return config_text, tensors


def load_into_model(model: torch.nn.Module, tensors) -> torch.nn.Module:
    """
    Copy checkpoint tensors into a model; every name and shape must match.
    """
    expected = model.state_dict()
    problems = []
    missing = [name for name in expected if name not in tensors]
    unexpected = [name for name in tensors if name not in expected]
    if missing:
        problems.append(f'missing tensors: {missing}')
    if unexpected:
        problems.append(f'unexpected tensors: {unexpected}')
    for name, tensor in tensors.items():
        if name in expected and tuple(expected[name].shape) != tuple(tensor.shape):
            problems.append(f'{name}: checkpoint shape {tuple(tensor.shape)}, model shape {tuple(expected[name].shape)}')
    if problems:
        raise CheckpointError('Checkpoint does not fit the configured model: ' + '; '.join(problems))
    model.load_state_dict(tensors)
    return model
