import pytest
import torch

from condiff.utils import (RunLog, check_divisible, cumulative_strides, exclusive_device, resolve_device,
                           seed_everything, state_digest)


def test_cumulative_strides():
    assert cumulative_strides([4, 2, 2, 2]) == [4, 8, 16, 32]


def test_check_divisible():
    assert check_divisible(64, 4, 'height')
    with pytest.raises(ValueError, match='height'):
        check_divisible(30, 4, 'height')


def test_resolve_device():
    assert resolve_device('cpu') == torch.device('cpu')
    with pytest.raises(ValueError):
        resolve_device('tpu')


def test_seeded_generators_agree():
    first = torch.randn(4, generator=seed_everything(3))
    second = torch.randn(4, generator=seed_everything(3))
    assert torch.equal(first, second)


def test_state_digest():
    tensors = [('a', torch.zeros(2)), ('b', torch.ones(3))]
    assert state_digest(tensors) == state_digest([(name, t.clone()) for name, t in tensors])
    assert state_digest(tensors) != state_digest([('a', torch.zeros(2)), ('b', torch.zeros(3))])


def test_exclusive_device():
    with exclusive_device('training'):
        with pytest.raises(RuntimeError):
            with exclusive_device('profiling'):
                pass
    with exclusive_device('profiling'):
        pass


class TestRunLog:

    def test_records_are_flushed(self, tmp_path):
        path = str(tmp_path / 'logs' / 'run_log.jsonl')
        run_log = RunLog(path)
        run_log.append(step=1, loss=0.5)
        run_log.append(step=2, loss=0.25)
        records = RunLog.read(path)
        assert [record['step'] for record in records] == [1, 2]
        assert all('wall_clock' in record for record in records)
        assert len(run_log) == 2

    def test_in_memory(self):
        run_log = RunLog()
        run_log.append(step=1)
        assert run_log.records[0]['step'] == 1
