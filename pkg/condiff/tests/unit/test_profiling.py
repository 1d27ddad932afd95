import itertools

import pytest
import torch

from condiff import training
from condiff.constants import *
from condiff.model import build_model
from condiff.profiling import MemoryMonitor, count_params, profile
from condiff.utils import exclusive_device


class TestCountParams:

    def test_linear(self):
        assert count_params(torch.nn.Linear(3, 5)) == 20

    def test_frozen_parameters_are_excluded(self):
        model = torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.Linear(5, 2))
        model[0].requires_grad_(False)
        assert count_params(model) == 12

    @pytest.mark.parametrize('mode', [FUSION_MODES[ADDITIVE], FUSION_MODES[CONCAT]])
    def test_matches_a_walk_of_the_parameter_registry(self, make_config, mode):
        model = build_model(make_config(f'adapter.fusion_mode={mode}'))
        model.adapter.stages[0].norm.requires_grad_(False)
        expected = 0
        for _, parameter in model.named_parameters():
            if parameter.requires_grad:
                expected += parameter.numel()
        assert count_params(model) == expected
        assert count_params(model) < sum(parameter.numel() for parameter in model.parameters())


class TestProfile:

    def test_single_iteration(self, model, schedule):
        report = profile(model, schedule, resolution=8, warmup=0, iters=1)
        assert report.trainable_params == count_params(model)
        assert report.train_ms_std == 0.0 and report.infer_ms_std == 0.0
        assert report.train_ms_per_step > 0 and report.infer_ms_per_image > 0
        assert report.errors == []

    def test_cpu_has_no_reserved_memory(self, model, schedule):
        report = profile(model, schedule, resolution=8, warmup=1, iters=2)
        values = report.to_dict()
        assert values['reserved_memory_mb'] == UNAVAILABLE
        assert values['typical_memory_mb'] > 0
        table = report.format_table()
        for _, header in PROFILE_COLUMNS:
            assert header in table

    def test_needs_an_iteration(self, model, schedule):
        with pytest.raises(ValueError):
            profile(model, schedule, resolution=8, iters=0)

    def test_device_is_exclusive(self, model, schedule):
        with exclusive_device('training'):
            with pytest.raises(RuntimeError, match='already in use'):
                profile(model, schedule, resolution=8, warmup=0, iters=1)
        profile(model, schedule, resolution=8, warmup=0, iters=1)

    def test_warmup_is_left_out_of_the_timings(self, model, schedule, monkeypatch):
        clock = itertools.count()
        calls = []

        def fake_timer():
            calls.append(None)
            return next(clock) * 1e-3

        monkeypatch.setattr('condiff.profiling.timer', fake_timer)
        modes = []
        handle = model.register_forward_hook(lambda module, inputs, output: modes.append(module.training))
        report = profile(model, schedule, resolution=8, batch_size=2, warmup=3, iters=4)
        handle.remove()

        # two clock reads per timed iteration, for training and for inference
        assert len(calls) == 2 * 2 * 4
        assert report.train_ms_per_step == pytest.approx(1.0)
        assert report.infer_ms_per_image == pytest.approx(0.5)
        assert report.train_ms_std == pytest.approx(0.0)
        # warmup runs for both training and inference
        assert modes.count(True) == 3 + 4
        assert modes.count(False) == 3 + 4

    def test_profiles_the_training_step(self, model, schedule, monkeypatch):
        clips = []

        def recording_step(state, batch, schedule, **kwargs):
            clips.append(kwargs.get('grad_clip'))
            return training.train_step(state, batch, schedule, **kwargs)

        monkeypatch.setattr('condiff.profiling.train_step', recording_step)
        profile(model, schedule, resolution=8, warmup=1, iters=2, grad_clip=0.5)
        assert clips == [0.5] * 3


class TestMemoryMonitor:

    def test_peak(self):
        with MemoryMonitor(torch.device('cpu'), hz=100.0) as monitor:
            pass
        assert len(monitor.samples) >= 2
        assert monitor.peak_mb == max(monitor.samples)
