"""
Utility functions for condiff
"""

import contextlib
import hashlib
import json
import logging
import math
import os
import random
import sys
import threading
from timeit import default_timer as timer
from typing import Iterable, Sequence

import numpy as np
import torch

from condiff.constants import *

# Serializes device-heavy work (training vs. profiling) inside one process
_DEVICE_LOCK = threading.Lock()


def log(msg, logger=None):
    funcname = sys._getframe().f_back.f_code.co_name
    if logger is None:
        logger = logging.getLogger('condiff').debug
    logger(f'[{funcname}]: {msg}')


def is_gpu_present() -> bool:
    '''Checks if a CUDA device is visible to torch'''
    return torch.cuda.is_available()


def resolve_device(device_type: str) -> torch.device:
    """
    Return the torch device for a device type as listed in condiff.constants.DEVICE_TYPES.
    Requesting a GPU on a host without one is an error rather than a silent fallback,
    since timings and memory figures would be meaningless.
    """
    if device_type == DEVICE_TYPES[CPU]:
        return torch.device('cpu')
    if device_type == DEVICE_TYPES[GPU]:
        if not is_gpu_present():
            raise ValueError(f"Device '{device_type}' requested, but torch does not see a CUDA device.")
        return torch.device('cuda')
    raise ValueError(f"Unknown device type '{device_type}', expected one of {sorted(DEVICE_TYPES.values())}")


def set_num_threads(num_threads: int):
    '''Set torch intra-op threads; 0 keeps the torch default'''
    if num_threads > 0:
        torch.set_num_threads(num_threads)
        log(f'torch intra-op threads set to {num_threads}')


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed python, numpy and torch and return a dedicated CPU generator for the caller's random stream.
    Deterministic algorithms are requested (warn only) so that seeded CPU runs are bit-reproducible.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
    return make_generator(seed)


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def cumulative_strides(strides: Sequence[int]) -> list:
    """
    Return the running products of the stage strides, e.g. [4, 2, 2, 2] -> [4, 8, 16, 32]
    """
    return [math.prod(strides[:i + 1]) for i in range(len(strides))]


def check_divisible(size: int, divisor: int, what: str) -> bool:
    """
    Checks that 'size' is divisible by 'divisor'. If not, raises an informative error.

    Arguments:
    - size: the spatial extent that is checked
    - divisor: stride or reduction ratio that must divide it
    - what: description of the quantity, used in the error message

    Return:
    - True (bool) if divisible
    - Function does not return (but raises ValueError) otherwise
    """
    if divisor < 1 or size % divisor != 0:
        raise ValueError(f'{what}: size {size} is not divisible by {divisor}.')
    return True


def state_digest(tensors: Iterable) -> str:
    """
    sha256 over the raw bytes of a sequence of (name, tensor) pairs, in the given order.
    Used to compare parameters of two runs bit for bit.
    """
    digest = hashlib.sha256()
    for name, tensor in tensors:
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


@contextlib.contextmanager
def exclusive_device(purpose: str):
    """
    Hold the process-wide device lock for the duration of the block.
    Profiling and training must not share the device: a second holder fails immediately.
    """
    if not _DEVICE_LOCK.acquire(blocking=False):
        raise RuntimeError(f'Cannot start {purpose}: the device is already in use by another task in this process.')
    try:
        yield
    finally:
        _DEVICE_LOCK.release()


class RunLog:
    """
    Append-only run log, one JSON record per line.
    Records are flushed immediately so that a crashed run still leaves a readable log.
    Without a path, records are only kept in memory.
    """

    def __init__(self, path: str = None):
        self.path = path
        self.records = []
        self._start = timer()
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, **record):
        record.setdefault('wall_clock', round(timer() - self._start, 6))
        self.records.append(record)
        if self.path:
            with open(self.path, 'a') as handle:
                handle.write(json.dumps(record, sort_keys=True) + '\n')
        return record

    def __len__(self):
        return len(self.records)

    @staticmethod
    def read(path: str) -> list:
        with open(path) as handle:
            return [json.loads(line) for line in handle if line.strip()]
