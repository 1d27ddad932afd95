"""
Dice (F1) and IoU for multi-class one-hot masks.

All functions are pure and work on exact integer pixel counts. The class axis of a mask is the
third-to-last one: [K, H, W] for a single image, [B, K, H, W] for a batch.
Class 0 is background; 'mean-foreground' averaging skips it.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from condiff.constants import *


@dataclass
class ConfusionCounts:
    '''Per-class true-positive, false-positive and false-negative pixel counts'''
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        self.tp, self.fp, self.fn = (np.asarray(a, dtype=np.int64) for a in (self.tp, self.fp, self.fn))
        if not (self.tp.shape == self.fp.shape == self.fn.shape) or self.tp.ndim != 1:
            raise ValueError(f'Counts must be 1D arrays of equal length, got shapes {self.tp.shape}, '
                             f'{self.fp.shape}, {self.fn.shape}')
        if (self.tp < 0).any() or (self.fp < 0).any() or (self.fn < 0).any():
            raise ValueError('Confusion counts must be non-negative')

    @property
    def num_classes(self) -> int:
        return self.tp.shape[0]

    @property
    def gt_positives(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def pred_positives(self) -> np.ndarray:
        return self.tp + self.fp

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _as_bool_onehot(mask, name: str) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.ndim < 3:
        raise ValueError(f'{name} must have a class axis: expected [..., K, H, W], got shape {mask.shape}')
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f'{name} is not one-hot: values outside {{0, 1}}')
    if not (mask.sum(axis=-3) == 1).all():
        raise ValueError(f'{name} is not one-hot: every pixel needs exactly one active class')
    return mask.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """
    Exact per-class pixel counts over all pixels (and batch elements) of two one-hot masks.
    """
    pred = _as_bool_onehot(pred, 'pred')
    gt = _as_bool_onehot(gt, 'gt')
    if pred.shape != gt.shape:
        raise ValueError(f'Shape mismatch between pred {pred.shape} and gt {gt.shape}')
    class_axis = pred.ndim - 3
    axes = tuple(a for a in range(pred.ndim) if a != class_axis)
    tp = (pred & gt).sum(axis=axes)
    fp = (pred & ~gt).sum(axis=axes)
    fn = (~pred & gt).sum(axis=axes)
    return ConfusionCounts(tp, fp, fn)


def image_confusions(pred, gt) -> List[ConfusionCounts]:
    '''One ConfusionCounts per batch element of [B, K, H, W] masks'''
    if len(pred) != len(gt):
        raise ValueError(f'Batch size mismatch: {len(pred)} predictions for {len(gt)} ground truths')
    return [confusion(p, g) for p, g in zip(pred, gt)]


def _ratio(numerator: np.ndarray, denominator: np.ndarray, absent_score: float) -> np.ndarray:
    scores = np.full(numerator.shape, absent_score, dtype=np.float64)
    present = denominator > 0
    scores[present] = numerator[present] / denominator[present]
    return scores


def _average(per_class: np.ndarray, averaging: str):
    if averaging == AVERAGING[PER_CLASS]:
        return per_class
    if averaging == AVERAGING[MEAN_FOREGROUND]:
        foreground = per_class[1:] if per_class.shape[0] > 1 else per_class
        return float(foreground.mean())
    raise ValueError(f"Unknown averaging '{averaging}', expected one of {list(AVERAGING.values())}")


def dice(counts: ConfusionCounts, averaging: str = AVERAGING[MEAN_FOREGROUND], absent_score: float = 1.0):
    """
    Per class 2TP / (2TP + FP + FN). A class absent from both masks scores 'absent_score'.
    Returns a float for mean-foreground averaging, a per-class array otherwise.
    """
    return _average(_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, absent_score), averaging)


def iou(counts: ConfusionCounts, averaging: str = AVERAGING[PER_CLASS], absent_score: float = 1.0):
    '''Per class TP / (TP + FP + FN), same absent-class convention as dice'''
    return _average(_ratio(counts.tp, counts.tp + counts.fp + counts.fn, absent_score), averaging)


def miou(counts: ConfusionCounts, averaging: str = AVERAGING[MEAN_FOREGROUND], absent_score: float = 1.0):
    return iou(counts, averaging, absent_score)


def batch_dice(pred, gt, absent_score: float = 1.0) -> np.ndarray:
    '''Mean-foreground Dice of every batch element'''
    return np.array([dice(counts, absent_score=absent_score) for counts in image_confusions(pred, gt)])


def _summary(values: np.ndarray):
    return float(values) if values.ndim == 0 else values.tolist()


def aggregate(counts: Sequence[ConfusionCounts], aggregation: str = AGGREGATION[PER_IMAGE],
              absent_score: float = 1.0, averaging: str = AVERAGING[MEAN_FOREGROUND]) -> dict:
    """
    Dataset-level scores from per-image counts.

    - per-image: mean (and median) of per-image scores
    - pooled: scores of the summed counts; the median equals the mean

    Returns dice, miou, their medians, and per-class dice and iou. With mean-foreground averaging
    the headline scores are floats; with per-class averaging they are lists with one entry per class.
    """
    if not counts:
        raise ValueError('Cannot aggregate scores of an empty dataset')
    if aggregation == AGGREGATION[POOLED]:
        total = counts[0]
        for item in counts[1:]:
            total = total + item
        per_class_dice = dice(total, AVERAGING[PER_CLASS], absent_score)
        per_class_iou = iou(total, AVERAGING[PER_CLASS], absent_score)
        dice_scores = np.array([_average(per_class_dice, averaging)])
        iou_scores = np.array([_average(per_class_iou, averaging)])
    elif aggregation == AGGREGATION[PER_IMAGE]:
        per_class_dice = np.stack([dice(c, AVERAGING[PER_CLASS], absent_score) for c in counts])
        per_class_iou = np.stack([iou(c, AVERAGING[PER_CLASS], absent_score) for c in counts])
        dice_scores = np.array([_average(row, averaging) for row in per_class_dice])
        iou_scores = np.array([_average(row, averaging) for row in per_class_iou])
        per_class_dice = per_class_dice.mean(axis=0)
        per_class_iou = per_class_iou.mean(axis=0)
    else:
        raise ValueError(f"Unknown aggregation '{aggregation}', expected one of {list(AGGREGATION.values())}")

    return {
        'dice': _summary(dice_scores.mean(axis=0)),
        'miou': _summary(iou_scores.mean(axis=0)),
        'dice_median': _summary(np.median(dice_scores, axis=0)),
        'miou_median': _summary(np.median(iou_scores, axis=0)),
        'per_class_dice': per_class_dice.tolist(),
        'per_class_iou': per_class_iou.tolist(),
        'num_images': len(counts),
    }
