"""
Synthetic multi-organ segmentation data and the portable dataset file format.

Dataset file layout (little-endian):

    header   magic b'CDDS' | version u16 | n u32 | K u16 | H u16 | W u16 | channels u16 | image dtype code u8
    sample   id length u16 | id (utf-8) | image float32 [C, H, W] | mask uint8 [H, W] | crc32 u32

The checksum covers the id, image and mask bytes of its own sample.
"""

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset

from condiff.constants import *
from condiff.utils import log

HEADER = struct.Struct('<4sHIHHHHB')
ID_LENGTH = struct.Struct('<H')
CHECKSUM = struct.Struct('<I')


class DatasetFormatError(ValueError):
    '''Malformed dataset file or sample'''


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # float32 [C, H, W] in [0, 1]
    mask: np.ndarray   # uint8 [H, W] class labels
    id: str

    def check(self, num_classes: int):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise DatasetFormatError(f'Sample {self.id}: expected image [C, H, W] and mask [H, W], got '
                                     f'{self.image.shape} and {self.mask.shape}')
        if self.image.shape[1:] != self.mask.shape:
            raise DatasetFormatError(f'Sample {self.id}: image {self.image.shape} and mask {self.mask.shape} '
                                     'differ in spatial dims')
        if self.mask.size and int(self.mask.max()) >= num_classes:
            raise DatasetFormatError(f'Sample {self.id}: label {int(self.mask.max())} out of range for '
                                     f'{num_classes} classes')


class SegmentationDataset(Dataset):
    """
    Immutable list of samples. Items are (image [C, H, W] float32, one-hot mask [K, H, W] float32).
    """

    def __init__(self, samples: Sequence[Sample], num_classes: int, size: Tuple[int, int] = None,
                 channels: int = None):
        if num_classes < 2:
            raise ValueError(f'Need at least 2 classes, got {num_classes}')
        self.samples = tuple(samples)
        self.num_classes = num_classes
        if self.samples:
            size = size or self.samples[0].mask.shape
            channels = channels or self.samples[0].image.shape[0]
        self.size = tuple(size) if size else (0, 0)
        self.channels = channels or 1
        for sample in self.samples:
            sample.check(num_classes)
            if sample.mask.shape != self.size or sample.image.shape[0] != self.channels:
                raise DatasetFormatError(f'Sample {sample.id} does not match the dataset geometry '
                                         f'{self.channels}x{self.size[0]}x{self.size[1]}')

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        image = torch.from_numpy(sample.image.copy())
        onehot = torch.nn.functional.one_hot(torch.from_numpy(sample.mask.astype(np.int64)), self.num_classes)
        return image, onehot.permute(2, 0, 1).float()

    def batch(self, indices) -> Tuple[torch.Tensor, torch.Tensor]:
        items = [self[i] for i in indices]
        return torch.stack([item[0] for item in items]), torch.stack([item[1] for item in items])


def _ellipse_distance(shape, center, axes, angle) -> np.ndarray:
    '''Normalized elliptical radius of every pixel centre; <= 1 inside the ellipse'''
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy + 0.5 - center[0], xx + 0.5 - center[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = (dx * cos + dy * sin) / axes[1]
    v = (-dx * sin + dy * cos) / axes[0]
    return np.sqrt(u ** 2 + v ** 2)


def generate_synthetic(n: int, num_classes: int = 4, size: Union[int, Tuple[int, int]] = 64, seed: int = 0,
                       rare_rate: float = 0.2, channels: int = 1, stride: int = 1) -> SegmentationDataset:
    """
    Deterministic synthetic "organ" dataset.

    Every sample holds one soft-edged ellipse per foreground class, painted in class order so later
    classes cover earlier ones; the mask is the exact painted geometry. Each class has its own
    intensity band on top of a noisy background texture. The last class is rare: it is present
    in exactly round(rare_rate * n) samples, chosen at random.

    Arguments:
    - n: number of samples
    - num_classes: K, including background
    - size: H (square) or (H, W)
    - stride: the adapter's cumulative stride; H and W must be divisible by it
    """
    height, width = (size, size) if isinstance(size, int) else tuple(size)
    if num_classes < 2:
        raise ValueError(f'Need at least 2 classes, got {num_classes}')
    if n < 0:
        raise ValueError(f'Number of samples must be >= 0, got {n}')
    if not 0.0 <= rare_rate <= 1.0:
        raise ValueError(f'Rare class rate must lie in [0, 1], got {rare_rate}')
    if height % stride != 0 or width % stride != 0:
        raise ValueError(f'Size {height}x{width} is not divisible by the cumulative stride {stride}')

    rng = np.random.default_rng(seed)
    rare_class = num_classes - 1
    rare_samples = set()
    if num_classes > 2:
        rare_samples = set(rng.permutation(n)[:int(round(rare_rate * n))].tolist())
    bands = np.linspace(0.3, 0.9, num_classes - 1)
    short_side = min(height, width)

    samples = []
    for index in range(n):
        image = 0.1 + 0.04 * rng.standard_normal((channels, height, width))
        mask = np.zeros((height, width), dtype=np.uint8)
        for label in range(1, num_classes):
            if label == rare_class and num_classes > 2 and index not in rare_samples:
                continue
            axes = rng.uniform(0.12, 0.25, size=2) * short_side
            center = (rng.uniform(0.25, 0.75) * height, rng.uniform(0.25, 0.75) * width)
            angle = rng.uniform(0.0, np.pi)
            distance = _ellipse_distance((height, width), center, axes, angle)
            # soft edge for the image, hard edge for the mask
            alpha = 1.0 / (1.0 + np.exp((distance - 1.0) * 12.0))
            intensity = bands[label - 1] + rng.uniform(-0.04, 0.04)
            texture = intensity + 0.03 * rng.standard_normal((channels, height, width))
            image = image * (1.0 - alpha) + texture * alpha
            mask[distance <= 1.0] = label
        samples.append(Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, f'synthetic-{seed}-{index:05d}'))

    log(f'generated {n} synthetic samples of {height}x{width} with {num_classes} classes (seed {seed})')
    return SegmentationDataset(samples, num_classes, (height, width), channels)


def save_dataset(dataset: SegmentationDataset, path: str):
    height, width = dataset.size
    if dataset.num_classes > 256:
        raise ValueError(f'At most 256 classes fit the uint8 mask encoding, got {dataset.num_classes}')
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), dataset.num_classes, height, width,
                                 dataset.channels, DTYPE_CODES['float32']))
        for sample in dataset.samples:
            ident = sample.id.encode('utf-8')
            payload = ident + sample.image.astype('<f4').tobytes() + sample.mask.astype(np.uint8).tobytes()
            handle.write(ID_LENGTH.pack(len(ident)))
            handle.write(payload)
            handle.write(CHECKSUM.pack(zlib.crc32(payload)))
    log(f'{len(dataset)} samples written to {path}')


def load_dataset(path: str) -> SegmentationDataset:
    with open(path, 'rb') as handle:
        data = handle.read()
    if len(data) < HEADER.size:
        raise DatasetFormatError(f'{path}: truncated header ({len(data)} bytes)')
    magic, version, n, num_classes, height, width, channels, dtype_code = HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f'{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}')
    if version != DATASET_VERSION:
        raise DatasetFormatError(f'{path}: unsupported version {version}, expected {DATASET_VERSION}')
    if dtype_code != DTYPE_CODES['float32']:
        raise DatasetFormatError(f'{path}: unsupported image dtype code {dtype_code}')

    image_bytes = channels * height * width * 4
    mask_bytes = height * width
    offset = HEADER.size
    samples = []
    for index in range(n):
        if offset + ID_LENGTH.size > len(data):
            raise DatasetFormatError(f'{path}: truncated at sample {index}')
        (id_length,) = ID_LENGTH.unpack_from(data, offset)
        offset += ID_LENGTH.size
        end = offset + id_length + image_bytes + mask_bytes
        if end + CHECKSUM.size > len(data):
            raise DatasetFormatError(f'{path}: truncated at sample {index}')
        payload = data[offset:end]
        (checksum,) = CHECKSUM.unpack_from(data, end)
        if zlib.crc32(payload) != checksum:
            raise DatasetFormatError(f'{path}: checksum mismatch in sample {index}')
        ident = payload[:id_length].decode('utf-8')
        image = np.frombuffer(payload, dtype='<f4', count=channels * height * width, offset=id_length)
        mask = np.frombuffer(payload, dtype=np.uint8, offset=id_length + image_bytes)
        samples.append(Sample(image.astype(np.float32).reshape(channels, height, width),
                              mask.copy().reshape(height, width), ident))
        offset = end + CHECKSUM.size
    if offset != len(data):
        raise DatasetFormatError(f'{path}: {len(data) - offset} trailing bytes after {n} samples')

    log(f'{n} samples read from {path}')
    return SegmentationDataset(samples, num_classes, (height, width), channels)


def class_pixel_counts(dataset: SegmentationDataset) -> np.ndarray:
    '''Exact pixel count per class over the whole dataset'''
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for sample in dataset.samples:
        counts += np.bincount(sample.mask.ravel(), minlength=dataset.num_classes)
    return counts


def class_frequencies(dataset: SegmentationDataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError('Cannot compute class frequencies of an empty dataset')
    counts = class_pixel_counts(dataset)
    return counts / counts.sum()


def class_presence(dataset: SegmentationDataset) -> np.ndarray:
    '''Boolean [n, K]: whether class k occurs in sample i'''
    presence = np.zeros((len(dataset), dataset.num_classes), dtype=bool)
    for i, sample in enumerate(dataset.samples):
        presence[i, np.unique(sample.mask)] = True
    return presence


def load_splits(config) -> Tuple[SegmentationDataset, SegmentationDataset]:
    """
    Training and validation sets described by the data section of a RunConfig.
    Synthetic validation data uses seed data.seed + 1. Without a val_path, a file source has no validation set.
    """
    data = config.data
    if data.source == DATA_SOURCES[FILE]:
        train = load_dataset(data.path)
        val = load_dataset(data.val_path) if data.val_path else SegmentationDataset([], train.num_classes,
                                                                                   train.size, train.channels)
        if train.num_classes != data.num_classes:
            raise DatasetFormatError(f'{data.path}: {train.num_classes} classes, configuration expects '
                                     f'{data.num_classes}')
        return train, val

    stride = int(np.prod(config.adapter.stage_strides))
    train = generate_synthetic(data.num_train, data.num_classes, data.size, data.seed, data.rare_rate,
                               data.channels, stride)
    val = generate_synthetic(data.num_val, data.num_classes, data.size, data.seed + 1, data.rare_rate,
                             data.channels, stride)
    return train, val
