"""
Evaluation protocol: best-of-1 and best-of-n sampling per case, scored with Dice and mIoU.
"""

from typing import Optional

import numpy as np
import torch

from condiff.constants import *
from condiff.diffusion import NoiseSchedule
from condiff.metrics import aggregate, image_confusions
from condiff.sampling import sample_draws, select_best
from condiff.utils import log

# seeds of consecutive evaluation batches are this far apart
SEED_STRIDE = 7919


def _batches(dataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        yield list(indices), dataset.batch(indices)


def predict(model, dataset, schedule: NoiseSchedule, config, n: int, device: Optional[torch.device] = None):
    """
    Best-of-1 and best-of-n masks for every case of a dataset.

    Draw i of batch b is seeded with run.seed + b * SEED_STRIDE + i, so best-of-1 is the first draw of
    best-of-n. Returns {n': (masks [N, K, H, W], dice [N])} for n' in {1, n}.
    """
    device = device or next(model.parameters()).device
    results = {count: ([], []) for count in sorted({1, n})}
    for b, (indices, (images, masks)) in enumerate(_batches(dataset, config.sampler.batch_size)):
        images = images.to(device)
        draws = sample_draws(images, model, schedule, n, config.run.seed + b * SEED_STRIDE, config.consensus,
                             config.sampler.stride)
        draws = [draw.cpu() for draw in draws]
        for count in results:
            best_masks, best_dice, _ = select_best(draws[:count], masks, config.evaluation.absent_score)
            results[count][0].append(best_masks)
            results[count][1].append(best_dice)
        log(f'cases {indices[0]}-{indices[-1]} sampled')
    return {count: (torch.cat(masks), np.concatenate(scores)) for count, (masks, scores) in results.items()}


def score(pred: torch.Tensor, gt: torch.Tensor, config, averaging: Optional[str] = None) -> dict:
    counts = image_confusions(pred, gt)
    return aggregate(counts, config.evaluation.aggregation, config.evaluation.absent_score,
                     averaging or config.evaluation.averaging)


def evaluate(model, dataset, schedule: NoiseSchedule, config, n: Optional[int] = None, oracle: bool = False,
             averaging: Optional[str] = None) -> dict:
    """
    Metrics report of a dataset: for best-of-1 and best-of-n, mean and median Dice and mIoU, and
    per-class scores, aggregated per evaluation.aggregation and averaged per evaluation.averaging
    (or 'averaging', when given).
    In oracle mode the ground truth is scored against itself and no sampling happens.
    Returns (report, predicted masks of best-of-n).
    """
    if len(dataset) == 0:
        raise ValueError('Cannot evaluate an empty dataset')
    n = n or config.evaluation.n_samples
    averaging = averaging or config.evaluation.averaging
    _, gt = dataset.batch(range(len(dataset)))
    report = {
        'num_cases': len(dataset),
        'aggregation': config.evaluation.aggregation,
        'averaging': averaging,
        'absent_score': config.evaluation.absent_score,
        'class_names': list(config.data.class_names),
    }
    if oracle:
        report['oracle'] = score(gt, gt, config, averaging)
        return report, gt

    with torch.no_grad():
        predictions = predict(model, dataset, schedule, config, n)
    for count, (masks, _) in predictions.items():
        report[f'best_of_{count}'] = score(masks, gt, config, averaging)
    report['n_samples'] = n
    return report, predictions[n][0]


def validation_scores(model, dataset, schedule: NoiseSchedule, config) -> dict:
    '''Best-of-1 mean-foreground Dice and mIoU, as logged during training'''
    was_training = model.training
    with torch.no_grad():
        masks = predict(model, dataset, schedule, config, 1)[1][0]
    model.train(was_training)
    _, gt = dataset.batch(range(len(dataset)))
    scores = score(masks, gt, config, AVERAGING[MEAN_FOREGROUND])
    return {'dice': scores['dice'], 'miou': scores['miou']}


def _table_rows(report: dict, key: str):
    scores = report[key]
    if not isinstance(scores['dice'], list):
        yield key, scores['dice'], scores['miou'], scores['dice_median'], scores['miou_median']
        return
    names = report.get('class_names') or [str(c) for c in range(len(scores['dice']))]
    for c, name in enumerate(names):
        yield (f'{key}:{name}', scores['dice'][c], scores['miou'][c], scores['dice_median'][c],
               scores['miou_median'][c])


def format_table(report: dict) -> str:
    """
    Plain-text table: one row per protocol, mean Dice (F-1) and mIoU in percent.
    Per-class averaging gives one row per protocol and class.
    """
    protocols = [key for key in report if key.startswith('best_of_') or key == 'oracle']
    rows = [row for key in protocols for row in _table_rows(report, key)]
    width = max([12] + [len(row[0]) + 2 for row in rows])
    lines = [f"{'Protocol':<{width}}{'F-1':>8}{'mIoU':>8}{'F-1 med':>10}{'mIoU med':>10}"]
    for label, dice_score, miou_score, dice_median, miou_median in rows:
        lines.append(f'{label:<{width}}{100 * dice_score:>8.1f}{100 * miou_score:>8.1f}'
                     f'{100 * dice_median:>10.1f}{100 * miou_median:>10.1f}')
    names = report.get('class_names', [])
    for key in protocols:
        per_class = ', '.join(f'{name} {100 * value:.1f}' for name, value in zip(names, report[key]['per_class_dice']))
        lines.append(f'{key} per-class F-1: {per_class}')
    return '\n'.join(lines)
