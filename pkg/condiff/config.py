"""
Run configuration for condiff.

A RunConfig is a tree of dataclasses, one per section. On disk it is flat key-value text:

    # comment
    schedule.T = 100
    adapter.stage_dims = 32, 64, 160, 256
    run.output_dir = runs/desk

Keys are written in dataclass field order, so serializing a config is byte-stable.
Unknown keys are errors, and every problem is reported in one pass.
"""

import copy
import math
import os
from dataclasses import dataclass, field, fields
from typing import List, get_type_hints

from condiff.adapter import AdapterConfig
from condiff.constants import *
from condiff.denoiser import DenoiserConfig
from condiff.sampling import ConsensusConfig
from condiff.utils import cumulative_strides, log


class ConfigError(ValueError):
    '''Invalid run configuration; 'errors' holds every problem found'''

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class LossConfig:
    lambda_dice: float = 0.5
    lambda_ce: float = 0.5
    smooth: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 16
    grad_clip: float = 1.0
    weighted_sampler: bool = True
    # weight of a sample without foreground is floor_scale / dataset size
    floor_scale: float = 1e-2
    # 0: checkpoint only at the end of training
    checkpoint_every: int = 0
    # 0: validate only after the final epoch
    validate_every: int = 0


@dataclass
class SamplerConfig:
    stride: int = 1
    batch_size: int = 8


@dataclass
class DataConfig:
    source: str = DATA_SOURCES[SYNTHETIC]
    path: str = ''
    val_path: str = ''
    num_train: int = 200
    num_val: int = 50
    num_classes: int = 4
    size: int = 64
    channels: int = 1
    rare_rate: float = 0.2
    seed: int = 0
    class_names: List[str] = field(default_factory=lambda: ['background', 'organ1', 'organ2', 'organ3'])


@dataclass
class EvaluationConfig:
    n_samples: int = 4
    averaging: str = AVERAGING[MEAN_FOREGROUND]
    aggregation: str = AGGREGATION[PER_IMAGE]
    absent_score: float = 1.0


@dataclass
class ProfileConfig:
    resolution: int = PROFILE_SCALES['desk']['resolution']
    batch_size: int = PROFILE_SCALES['desk']['batch_size']
    warmup: int = 5
    iters: int = 20
    monitor_hz: float = 10.0


@dataclass
class AblationConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = 'runs/default'
    device: str = DEVICE_TYPES[CPU]
    num_threads: int = 0


SECTIONS = {
    'schedule': ScheduleConfig,
    'adapter': AdapterConfig,
    'denoiser': DenoiserConfig,
    'loss': LossConfig,
    'optim': OptimConfig,
    'sampler': SamplerConfig,
    'consensus': ConsensusConfig,
    'data': DataConfig,
    'evaluation': EvaluationConfig,
    'profile': ProfileConfig,
    'ablation': AblationConfig,
    'run': RunSection,
}


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_text(cls, text: str, validate: bool = True) -> 'RunConfig':
        config = cls()
        errors = config._assign_lines(text.splitlines())
        if validate:
            errors += config.validate()
        if errors:
            raise ConfigError(errors)
        return config

    @classmethod
    def from_file(cls, path: str, validate: bool = True) -> 'RunConfig':
        if not os.path.isfile(path):
            raise ConfigError([f"config file '{path}' does not exist"])
        with open(path) as handle:
            config = cls.from_text(handle.read(), validate=validate)
        log(f'configuration read from {path}')
        return config

    def to_text(self) -> str:
        lines = []
        for section_name in SECTIONS:
            section = getattr(self, section_name)
            for item in fields(section):
                lines.append(f'{section_name}.{item.name} = {_format_value(getattr(section, item.name))}')
        return '\n'.join(lines) + '\n'

    def write(self, path: str):
        with open(path, 'w') as handle:
            handle.write(self.to_text())

    def copy(self) -> 'RunConfig':
        return copy.deepcopy(self)

    def apply_overrides(self, overrides: List[str], validate: bool = True) -> 'RunConfig':
        """
        Apply 'section.key=value' strings (as given on the command line) in order, in place.
        """
        errors = self._assign_lines(overrides, source='override')
        if validate:
            errors += self.validate()
        if errors:
            raise ConfigError(errors)
        return self

    def _assign_lines(self, lines, source='line') -> List[str]:
        errors = []
        for number, raw in enumerate(lines, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                errors.append(f"{source} {number}: expected 'section.key = value', got '{raw.strip()}'")
                continue
            key, value = (part.strip() for part in line.split('=', 1))
            error = self.set(key, value)
            if error:
                errors.append(f'{source} {number}: {error}')
        return errors

    def set(self, key: str, value: str):
        '''Parse and assign one dotted key; returns an error string instead of raising'''
        section_name, _, name = key.partition('.')
        if section_name not in SECTIONS or not name:
            return f"unknown key '{key}'"
        section = getattr(self, section_name)
        hints = get_type_hints(type(section))
        if name not in hints or name not in {item.name for item in fields(section)}:
            return f"unknown key '{key}'"
        try:
            setattr(section, name, _parse_value(value, hints[name]))
        except ValueError as err:
            return f"{key}: {err}"
        return None

    def validate(self) -> List[str]:
        """
        Return every problem found in this configuration; an empty list means it is valid.
        """
        errors = []
        schedule, data, optim = self.schedule, self.data, self.optim

        if schedule.T < 1:
            errors.append(f'schedule.T must be >= 1, got {schedule.T}')
        if not (0.0 < schedule.beta_start < 1.0 and 0.0 < schedule.beta_end < 1.0):
            errors.append(f'schedule: beta bounds must lie in (0, 1), got {schedule.beta_start}, {schedule.beta_end}')
        elif schedule.beta_start > schedule.beta_end:
            errors.append(f'schedule.beta_start ({schedule.beta_start}) exceeds schedule.beta_end '
                          f'({schedule.beta_end})')

        adapter_errors = self.adapter.validate()
        errors += adapter_errors
        errors += self.denoiser.validate()
        if list(self.denoiser.strides) != list(self.adapter.stage_strides):
            errors.append(f'denoiser.strides {self.denoiser.strides} must equal adapter.stage_strides '
                          f'{self.adapter.stage_strides}')
        if not (data.num_classes == self.adapter.mask_channels == self.denoiser.num_classes):
            errors.append(f'class count must agree: data.num_classes={data.num_classes}, '
                          f'adapter.mask_channels={self.adapter.mask_channels}, '
                          f'denoiser.num_classes={self.denoiser.num_classes}')
        if data.channels != self.adapter.in_channels:
            errors.append(f'data.channels ({data.channels}) must equal adapter.in_channels '
                          f'({self.adapter.in_channels})')
        if len(data.class_names) != data.num_classes:
            errors.append(f'data.class_names has {len(data.class_names)} entries for {data.num_classes} classes')

        if not adapter_errors:
            errors += self._check_resolution(data.size, 'data.size')
            errors += self._check_resolution(self.profile.resolution, 'profile.resolution')

        for name, value in [('loss.lambda_dice', self.loss.lambda_dice), ('loss.lambda_ce', self.loss.lambda_ce)]:
            if value < 0:
                errors.append(f'{name} must be >= 0, got {value}')
        if self.loss.lambda_dice == 0 and self.loss.lambda_ce == 0:
            errors.append('loss: lambda_dice and lambda_ce cannot both be 0')
        if self.loss.smooth < 0:
            errors.append(f'loss.smooth must be >= 0, got {self.loss.smooth}')

        if optim.lr < 0 or optim.weight_decay < 0:
            errors.append(f'optim: lr and weight_decay must be >= 0, got {optim.lr} and {optim.weight_decay}')
        if optim.epochs < 0:
            errors.append(f'optim.epochs must be >= 0, got {optim.epochs}')
        if optim.batch_size < 1:
            errors.append(f'optim.batch_size must be >= 1, got {optim.batch_size}')
        if optim.grad_clip <= 0:
            errors.append(f'optim.grad_clip must be positive, got {optim.grad_clip}')
        if not 0 < optim.floor_scale < 1:
            errors.append(f'optim.floor_scale must lie in (0, 1), got {optim.floor_scale}')
        if optim.checkpoint_every < 0 or optim.validate_every < 0:
            errors.append('optim.checkpoint_every and optim.validate_every must be >= 0')

        if self.sampler.stride < 1 or self.sampler.stride > max(schedule.T, 1):
            errors.append(f'sampler.stride must lie in [1, schedule.T], got {self.sampler.stride}')
        if self.sampler.batch_size < 1:
            errors.append(f'sampler.batch_size must be >= 1, got {self.sampler.batch_size}')

        errors += self.consensus.validate()

        if data.source not in DATA_SOURCES.values():
            errors.append(f"data.source '{data.source}' is not one of {list(DATA_SOURCES.values())}")
        elif data.source == DATA_SOURCES[FILE]:
            if not data.path:
                errors.append('data.path is required when data.source is file')
            elif not os.path.isfile(data.path):
                errors.append(f"data.path '{data.path}' does not exist")
            if data.val_path and not os.path.isfile(data.val_path):
                errors.append(f"data.val_path '{data.val_path}' does not exist")
        if data.num_train < 0 or data.num_val < 0:
            errors.append('data.num_train and data.num_val must be >= 0')
        if not 0.0 <= data.rare_rate <= 1.0:
            errors.append(f'data.rare_rate must lie in [0, 1], got {data.rare_rate}')

        evaluation = self.evaluation
        if evaluation.n_samples < 1:
            errors.append(f'evaluation.n_samples must be >= 1, got {evaluation.n_samples}')
        if evaluation.averaging not in AVERAGING.values():
            errors.append(f"evaluation.averaging '{evaluation.averaging}' is not one of {list(AVERAGING.values())}")
        if evaluation.aggregation not in AGGREGATION.values():
            errors.append(f"evaluation.aggregation '{evaluation.aggregation}' is not one of "
                          f"{list(AGGREGATION.values())}")
        if not 0.0 <= evaluation.absent_score <= 1.0:
            errors.append(f'evaluation.absent_score must lie in [0, 1], got {evaluation.absent_score}')

        if self.profile.batch_size < 1 or self.profile.iters < 1 or self.profile.warmup < 0:
            errors.append('profile: batch_size and iters must be >= 1, warmup >= 0')
        if self.profile.monitor_hz <= 0:
            errors.append(f'profile.monitor_hz must be positive, got {self.profile.monitor_hz}')

        if not self.ablation.seeds:
            errors.append('ablation.seeds must list at least one seed')

        if self.run.device not in DEVICE_TYPES.values():
            errors.append(f"run.device '{self.run.device}' is not one of {list(DEVICE_TYPES.values())}")
        if self.run.num_threads < 0:
            errors.append(f'run.num_threads must be >= 0, got {self.run.num_threads}')
        if not self.run.output_dir:
            errors.append('run.output_dir must not be empty')
        return errors

    def _check_resolution(self, resolution: int, what: str) -> List[str]:
        total = math.prod(self.adapter.stage_strides)
        if resolution < 1 or resolution % total != 0:
            return [f'{what} {resolution} is not divisible by the cumulative stride {total}']
        errors = []
        strides = cumulative_strides(self.adapter.stage_strides)
        for s, (stride, r) in enumerate(zip(strides, self.adapter.reduction_ratios)):
            grid = resolution // stride
            if grid % r != 0:
                errors.append(f'{what} {resolution}: reduction ratio {r} does not divide the stage {s + 1} '
                              f'grid {grid}x{grid}')
        return errors

    def check(self) -> 'RunConfig':
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return self


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ', '.join(_format_value(item) for item in value)
    return str(value)


def _parse_value(text: str, annotation):
    if annotation is bool:
        lowered = text.lower()
        if lowered not in ('true', 'false'):
            raise ValueError(f"expected true or false, got '{text}'")
        return lowered == 'true'
    if annotation is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got '{text}'")
    if annotation is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got '{text}'")
    if annotation is str:
        return text
    item_type = getattr(annotation, '__args__', (str,))[0]
    if not text:
        return []
    return [_parse_value(item.strip(), item_type) for item in text.split(',')]
