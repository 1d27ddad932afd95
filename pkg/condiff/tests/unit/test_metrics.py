import numpy as np
import pytest
import torch

from condiff.constants import *
from condiff.metrics import ConfusionCounts, aggregate, batch_dice, confusion, dice, image_confusions, iou, miou


def _onehot(labels, num_classes):
    labels = np.asarray(labels)
    return np.moveaxis(np.eye(num_classes, dtype=np.uint8)[labels], -1, -3)


class TestConfusion:

    def test_two_by_two(self):
        gt = _onehot([[1, 1], [0, 0]], 2)
        pred = _onehot([[1, 0], [1, 0]], 2)
        counts = confusion(pred, gt)
        assert counts.tp.tolist() == [1, 1]
        assert counts.fp.tolist() == [1, 1]
        assert counts.fn.tolist() == [1, 1]
        assert dice(counts) == pytest.approx(0.5)
        assert miou(counts) == pytest.approx(1 / 3)

    def test_accepts_tensors(self):
        labels = torch.randint(0, 3, (2, 4, 4))
        onehot = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float()
        counts = confusion(onehot, onehot)
        assert counts.fp.sum() == 0 and counts.fn.sum() == 0
        assert counts.tp.sum() == 32

    def test_rejects_non_onehot(self):
        gt = _onehot([[1, 0]], 2)
        with pytest.raises(ValueError):
            confusion(gt * 2, gt)
        with pytest.raises(ValueError):
            confusion(np.zeros_like(gt), gt)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion(_onehot([[1, 0]], 2), _onehot([[1, 0]], 3))

    def test_counts_validation(self):
        with pytest.raises(ValueError):
            ConfusionCounts([1, -1], [0, 0], [0, 0])
        with pytest.raises(ValueError):
            ConfusionCounts([1, 1], [0], [0, 0])


class TestScores:

    def test_absent_class(self):
        gt = _onehot([[0, 1], [1, 0]], 3)
        counts = confusion(gt, gt)
        np.testing.assert_allclose(dice(counts, AVERAGING[PER_CLASS]), [1.0, 1.0, 1.0])
        np.testing.assert_allclose(dice(counts, AVERAGING[PER_CLASS], absent_score=0.0), [1.0, 1.0, 0.0])
        assert dice(counts) == 1.0

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            num_classes = int(rng.integers(2, 5))
            gt_labels = rng.integers(0, num_classes, (8, 8))
            pred_labels = rng.integers(0, num_classes, (8, 8))
            counts = confusion(_onehot(pred_labels, num_classes), _onehot(gt_labels, num_classes))
            per_class_dice = dice(counts, AVERAGING[PER_CLASS])
            per_class_iou = iou(counts)
            for k in range(num_classes):
                tp = fp = fn = 0
                for p, g in zip(pred_labels.ravel(), gt_labels.ravel()):
                    tp += int(p == k and g == k)
                    fp += int(p == k and g != k)
                    fn += int(p != k and g == k)
                expected = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
                assert per_class_dice[k] == pytest.approx(expected, abs=1e-12)
                assert 0.0 <= per_class_iou[k] <= per_class_dice[k] <= 1.0
            np.testing.assert_allclose(per_class_iou, per_class_dice / (2 - per_class_dice), atol=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        pred = _onehot(rng.integers(0, 4, (3, 8, 8)), 4)
        gt = _onehot(rng.integers(0, 4, (3, 8, 8)), 4)
        np.testing.assert_allclose(dice(confusion(pred, gt), AVERAGING[PER_CLASS]),
                                   dice(confusion(gt, pred), AVERAGING[PER_CLASS]))

    def test_batch_dice(self):
        gt = _onehot([[[1, 1], [0, 0]], [[0, 1], [0, 1]]], 2)
        pred = _onehot([[[1, 0], [1, 0]], [[0, 1], [0, 1]]], 2)
        np.testing.assert_allclose(batch_dice(pred, gt), [0.5, 1.0])

    def test_unknown_averaging(self):
        counts = ConfusionCounts([1, 1], [0, 0], [0, 0])
        with pytest.raises(ValueError):
            dice(counts, 'median')


class TestAggregate:

    def _counts(self):
        gt = _onehot([[[1, 1], [0, 0]], [[0, 1], [0, 1]]], 2)
        pred = _onehot([[[1, 0], [1, 0]], [[0, 1], [0, 1]]], 2)
        return image_confusions(pred, gt)

    def test_per_image(self):
        report = aggregate(self._counts())
        assert report['dice'] == pytest.approx(0.75)
        assert report['dice_median'] == pytest.approx(0.75)
        assert report['miou'] == pytest.approx((1 / 3 + 1) / 2)
        assert report['num_images'] == 2

    def test_pooled(self):
        report = aggregate(self._counts(), AGGREGATION[POOLED])
        # foreground: tp 3, fp 1, fn 1
        assert report['dice'] == pytest.approx(6 / 8)
        assert report['miou'] == pytest.approx(3 / 5)
        assert report['dice_median'] == report['dice']

    def test_per_class_averaging(self):
        gt = _onehot([[[1, 1], [0, 0]]], 2)
        pred = _onehot([[[1, 1], [1, 0]]], 2)
        counts = image_confusions(pred, gt)
        assert aggregate(counts)['dice'] == pytest.approx(0.8)
        report = aggregate(counts, averaging=AVERAGING[PER_CLASS])
        np.testing.assert_allclose(report['dice'], [2 / 3, 0.8])
        np.testing.assert_allclose(report['miou'], [0.5, 2 / 3])
        np.testing.assert_allclose(report['dice_median'], report['dice'])
        pooled = aggregate(counts, AGGREGATION[POOLED], averaging=AVERAGING[PER_CLASS])
        np.testing.assert_allclose(pooled['dice'], [2 / 3, 0.8])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_unknown_aggregation(self):
        with pytest.raises(ValueError):
            aggregate(self._counts(), 'micro')
