import numpy as np
import pytest
import torch

from condiff.constants import *
from condiff.data import SegmentationDataset
from condiff.evaluation import evaluate, format_table, predict, validation_scores


class TestEvaluate:

    def test_oracle_is_perfect(self, config, dataset, schedule):
        report, masks = evaluate(None, dataset, schedule, config, oracle=True)
        assert report['oracle']['dice'] == 1.0
        assert report['oracle']['miou'] == 1.0
        assert report['num_cases'] == len(dataset)
        assert masks.shape == (len(dataset), 2, 8, 8)

    def test_best_of_n_report(self, config, model, dataset, schedule):
        report, masks = evaluate(model, dataset, schedule, config)
        assert report['n_samples'] == 2
        assert {'best_of_1', 'best_of_2'} <= set(report)
        assert report['best_of_2']['dice'] >= report['best_of_1']['dice']
        assert len(report['best_of_1']['per_class_dice']) == 2
        assert masks.shape == (len(dataset), 2, 8, 8)
        assert report['class_names'] == ['background', 'organ']

    def test_best_of_one_is_the_first_draw(self, config, model, dataset, schedule):
        results = predict(model, dataset, schedule, config, 3)
        single = predict(model, dataset, schedule, config, 1)
        assert torch.equal(results[1][0], single[1][0])
        assert np.all(results[3][1] >= results[1][1])

    def test_empty_dataset(self, config, model, schedule):
        with pytest.raises(ValueError):
            evaluate(model, SegmentationDataset([], 2, (8, 8), 1), schedule, config)

    def test_per_class_averaging(self, make_config, model, dataset, schedule):
        config = make_config(f'evaluation.averaging={AVERAGING[PER_CLASS]}')
        report, _ = evaluate(model, dataset, schedule, config)
        assert report['averaging'] == AVERAGING[PER_CLASS]
        for key in ('best_of_1', 'best_of_2'):
            assert isinstance(report[key]['dice'], list) and len(report[key]['dice']) == 2
            assert len(report[key]['miou_median']) == 2
        table = format_table(report)
        assert 'best_of_1:background' in table and 'best_of_2:organ' in table

        default, _ = evaluate(model, dataset, schedule, make_config())
        assert isinstance(default['best_of_1']['dice'], float)
        assert report['best_of_1']['dice'][1] == pytest.approx(default['best_of_1']['per_class_dice'][1])

    def test_format_table(self, config, dataset, schedule):
        report, _ = evaluate(None, dataset, schedule, config, oracle=True)
        table = format_table(report)
        assert table.splitlines()[0].split() == ['Protocol', 'F-1', 'mIoU', 'F-1', 'med', 'mIoU', 'med']
        assert table.splitlines()[1].split()[:3] == ['oracle', '100.0', '100.0']
        assert 'oracle per-class F-1: background 100.0, organ 100.0' in table


class TestValidationScores:

    def test_keeps_training_mode(self, config, model, dataset, schedule):
        model.train()
        scores = validation_scores(model, dataset, schedule, config)
        assert set(scores) == {'dice', 'miou'}
        assert 0.0 <= scores['miou'] <= scores['dice'] <= 1.0
        assert model.training

    def test_headline_under_per_class_averaging(self, make_config, model, dataset, schedule):
        config = make_config(f'evaluation.averaging={AVERAGING[PER_CLASS]}')
        scores = validation_scores(model, dataset, schedule, config)
        assert isinstance(scores['dice'], float) and isinstance(scores['miou'], float)
