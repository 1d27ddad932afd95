"""
Lightweight profiling: trainable parameters, reserved and typical memory, training-step and inference time.

Timings use a monotonic wall clock with device synchronization before every clock read. Reserved
memory is the CUDA caching allocator's peak reservation; typical memory is the peak of a background
monitor sampling at a fixed rate (allocated CUDA memory on a GPU, resident set size on a CPU).
On a CPU there is no allocator reservation: reserved memory is reported as unavailable.
"""

import json
import threading
from dataclasses import asdict, dataclass, field
from timeit import default_timer as timer
from typing import List, Optional

import numpy as np
import psutil
import torch
import torch.nn.functional as F

from condiff.constants import *
from condiff.diffusion import NoiseSchedule, mask_to_x, q_sample
from condiff.training import TrainState, train_step
from condiff.utils import exclusive_device, log, make_generator

MB = 1024 ** 2


@dataclass
class ProfileReport:
    trainable_params: int
    reserved_memory_mb: Optional[float]
    typical_memory_mb: Optional[float]
    train_ms_per_step: Optional[float]
    train_ms_std: Optional[float]
    infer_ms_per_image: Optional[float]
    infer_ms_std: Optional[float]
    device: str
    device_name: str
    resolution: int
    batch_size: int
    warmup: int
    iters: int
    errors: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        '''Absent readings are reported as "unavailable", never as 0'''
        return {key: UNAVAILABLE if value is None else value for key, value in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def format_table(self, name: str = 'condiff') -> str:
        values = {
            'trainable_params': f'{self.trainable_params / 1e6:.3f}',
            'reserved_memory_mb': _fmt(self.reserved_memory_mb),
            'typical_memory_mb': _fmt(self.typical_memory_mb),
            'train_ms_per_step': _fmt(self.train_ms_per_step, self.train_ms_std),
            'infer_ms_per_image': _fmt(self.infer_ms_per_image, self.infer_ms_std),
        }
        headers = ['Model'] + [header for _, header in PROFILE_COLUMNS]
        cells = [name] + [values[key] for key, _ in PROFILE_COLUMNS]
        widths = [max(len(h), len(c)) + 2 for h, c in zip(headers, cells)]
        lines = [''.join(h.rjust(w) for h, w in zip(headers, widths)),
                 ''.join(c.rjust(w) for c, w in zip(cells, widths))]
        lines.append(f'device {self.device_name}, resolution {self.resolution}, batch size {self.batch_size}')
        lines.extend(f'error: {error}' for error in self.errors)
        return '\n'.join(lines)


def _fmt(mean: Optional[float], std: Optional[float] = None) -> str:
    if mean is None:
        return UNAVAILABLE
    if std is None:
        return f'{mean:.1f}'
    return f'{mean:.1f} ± {std:.1f}'


def count_params(model: torch.nn.Module) -> int:
    '''Number of elements over all trainable parameter tensors'''
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


class MemoryMonitor:
    """
    Background thread recording the peak memory in use, sampled at 'hz' samples per second.
    Use as a context manager; 'peak_mb' is the largest sample seen (None without samples).
    """

    def __init__(self, device: torch.device, hz: float = 10.0):
        self.device = torch.device(device)
        self.interval = 1.0 / hz
        self.samples = []
        self._stop = threading.Event()
        self._thread = None
        self._process = psutil.Process()

    def read(self) -> float:
        if self.device.type == 'cuda':
            return torch.cuda.memory_allocated(self.device) / MB
        return self._process.memory_info().rss / MB

    def _run(self):
        while not self._stop.is_set():
            self.samples.append(self.read())
            self._stop.wait(self.interval)

    def __enter__(self):
        self.samples.append(self.read())
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.samples.append(self.read())
        return False

    @property
    def peak_mb(self) -> Optional[float]:
        return max(self.samples) if self.samples else None


def _synchronize(device: torch.device):
    if device.type == 'cuda':
        torch.cuda.synchronize(device)


def _is_oom(err: Exception) -> bool:
    if isinstance(err, torch.cuda.OutOfMemoryError):
        return True
    return isinstance(err, (RuntimeError, MemoryError)) and 'out of memory' in str(err).lower()


def _stats(samples: List[float]):
    if not samples:
        return None, None
    values = np.asarray(samples, dtype=np.float64)
    return float(values.mean()), float(values.std())


def profile(model: torch.nn.Module, schedule: NoiseSchedule, resolution: int, batch_size: int = 1, warmup: int = 5,
            iters: int = 20, device: Optional[torch.device] = None, lr: float = 1e-4, seed: int = 0,
            monitor_hz: float = 10.0, in_channels: Optional[int] = None, grad_clip: float = 1.0) -> ProfileReport:
    """
    Profile one training configuration.

    Runs 'warmup' untimed training steps, then 'iters' timed training steps (the train_step of
    training: forward, loss, backward, clipping, optimizer update), then 'warmup' untimed and
    'iters' timed single forward passes in inference mode. Only the timed iterations enter the
    statistics (mean and population std, in milliseconds). Inference time is reported per image.
    Running out of memory ends the run with an entry in 'errors'.
    The model is trained in place: profile a scratch instance.
    """
    if iters < 1:
        raise ValueError(f'Profiling needs iters >= 1, got {iters}')
    if warmup < 0 or batch_size < 1:
        raise ValueError(f'Profiling needs warmup >= 0 and batch_size >= 1, got {warmup} and {batch_size}')
    device = torch.device(device) if device is not None else next(model.parameters()).device
    device_name = torch.cuda.get_device_name(device) if device.type == 'cuda' else 'cpu'
    if in_channels is None:
        adapter = getattr(model, 'adapter', None)
        in_channels = adapter.config.in_channels if adapter is not None else 1

    generator = make_generator(seed)
    num_classes = model.num_classes
    image = torch.rand((batch_size, in_channels, resolution, resolution), generator=generator).to(device)
    labels = torch.randint(0, num_classes, (batch_size, resolution, resolution), generator=generator)
    onehot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).float().to(device)
    t = torch.randint(1, schedule.T + 1, (batch_size,), generator=generator).to(device)
    eps = torch.randn(onehot.shape, generator=generator).to(device)
    x_t = q_sample(mask_to_x(onehot), t, eps, schedule)
    state = TrainState(model=model, optimizer=torch.optim.AdamW(model.parameters(), lr=lr), generator=generator,
                       device=device)

    def train_once():
        train_step(state, (image, onehot), schedule, grad_clip=grad_clip)

    def infer_once():
        model.eval()
        with torch.no_grad():
            model(image, x_t, t)

    def timed(fn, per: int = 1) -> List[float]:
        for _ in range(warmup):
            fn()
        _synchronize(device)
        samples = []
        for _ in range(iters):
            start = timer()
            fn()
            _synchronize(device)
            samples.append((timer() - start) * 1e3 / per)
        return samples

    train_ms, infer_ms, errors = [], [], []
    reserved = None
    with exclusive_device('profiling'):
        if device.type == 'cuda':
            torch.cuda.reset_peak_memory_stats(device)
        with MemoryMonitor(device, monitor_hz) as monitor:
            try:
                train_ms = timed(train_once)
                infer_ms = timed(infer_once, per=batch_size)
            except Exception as err:
                if not _is_oom(err):
                    raise
                errors.append(f'out of memory at resolution {resolution}, batch size {batch_size}: {err}')
                log(errors[-1])
        if device.type == 'cuda':
            reserved = torch.cuda.max_memory_reserved(device) / MB

    train_mean, train_std = _stats(train_ms)
    infer_mean, infer_std = _stats(infer_ms)
    report = ProfileReport(
        trainable_params=count_params(model),
        reserved_memory_mb=reserved,
        typical_memory_mb=monitor.peak_mb,
        train_ms_per_step=train_mean,
        train_ms_std=train_std,
        infer_ms_per_image=infer_mean,
        infer_ms_std=infer_std,
        device=device.type,
        device_name=device_name,
        resolution=resolution,
        batch_size=batch_size,
        warmup=warmup,
        iters=iters,
        errors=errors,
    )
    log(f'profiled at resolution {resolution}: train {train_mean} ms/step, inference {infer_mean} ms/image')
    return report
