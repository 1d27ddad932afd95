"""
Shared fixtures: a two-scale model on 8x8 masks with two classes, small enough to train in a unit test.
"""

import pytest
import torch

from condiff.config import RunConfig
from condiff.data import generate_synthetic
from condiff.diffusion import make_schedule
from condiff.model import build_model
from condiff.utils import seed_everything

TINY_OVERRIDES = [
    'schedule.T=5',
    'adapter.stage_dims=8, 16',
    'adapter.stage_strides=2, 2',
    'adapter.reduction_ratios=2, 1',
    'adapter.num_heads=1, 2',
    'adapter.depths=1, 1',
    'adapter.mask_channels=2',
    'adapter.time_dim=8',
    'denoiser.widths=8, 16',
    'denoiser.strides=2, 2',
    'denoiser.time_dim=8',
    'denoiser.num_classes=2',
    'denoiser.groups=4',
    'optim.epochs=1',
    'optim.batch_size=4',
    'sampler.batch_size=4',
    'consensus.k=3',
    'data.num_classes=2',
    'data.class_names=background, organ',
    'data.size=8',
    'data.num_train=8',
    'data.num_val=4',
    'evaluation.n_samples=2',
    'profile.resolution=8',
    'profile.warmup=1',
    'profile.iters=2',
    'ablation.seeds=0',
]


def tiny_config(tmp_path=None, extra=()) -> RunConfig:
    config = RunConfig()
    overrides = list(TINY_OVERRIDES) + list(extra)
    if tmp_path is not None:
        overrides.append(f'run.output_dir={tmp_path}')
    return config.apply_overrides(overrides)


@pytest.fixture
def make_config(tmp_path):
    '''Factory for tiny configs with extra overrides, writing under tmp_path'''
    def make(*extra):
        return tiny_config(tmp_path, extra)
    return make


@pytest.fixture
def config(make_config):
    return make_config()


@pytest.fixture
def schedule(config):
    return make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)


@pytest.fixture
def model(config):
    seed_everything(0)
    return build_model(config)


@pytest.fixture
def dataset(config):
    return generate_synthetic(config.data.num_train, config.data.num_classes, config.data.size, seed=0, stride=4)


@pytest.fixture
def batch(dataset):
    return dataset.batch(range(4))


@pytest.fixture(autouse=True)
def single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def tiny_overrides():
    return list(TINY_OVERRIDES)
