"""
Conditioned reverse diffusion, consensus of the intermediate predictions, and best-of-n selection.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from condiff.constants import *
from condiff.diffusion import NoiseSchedule, logits_to_x, respace, reverse_step
from condiff.metrics import batch_dice
from condiff.utils import log, make_generator


@dataclass
class ConsensusConfig:
    mode: str = CONSENSUS_MODES[MEAN_LAST_K]
    k: int = 10
    # winning mean probability below the threshold falls back to background; 0 disables
    threshold: float = 0.0

    def validate(self) -> List[str]:
        errors = []
        if self.mode not in CONSENSUS_MODES.values():
            errors.append(f"consensus.mode '{self.mode}' is not one of {list(CONSENSUS_MODES.values())}")
        if self.k < 1:
            errors.append(f'consensus.k must be >= 1, got {self.k}')
        if not 0.0 <= self.threshold <= 1.0:
            errors.append(f'consensus.threshold must lie in [0, 1], got {self.threshold}')
        if self.threshold > 0 and self.mode == CONSENSUS_MODES[MAJORITY_VOTE]:
            errors.append(f'consensus.threshold applies to {CONSENSUS_MODES[MEAN_LAST_K]} only, '
                          f'set it to 0 for {CONSENSUS_MODES[MAJORITY_VOTE]}')
        return errors


@dataclass
class PredictionTrace:
    """
    The x0 predictions of a reverse run, in execution order (t = T first), as class logits.
    """
    predictions: List[torch.Tensor] = field(default_factory=list)
    timesteps: List[int] = field(default_factory=list)

    def append(self, prediction: torch.Tensor, t: int):
        if self.predictions and prediction.shape != self.predictions[0].shape:
            raise ValueError(f'Trace entries must share one shape: {tuple(self.predictions[0].shape)} vs '
                             f'{tuple(prediction.shape)}')
        self.predictions.append(prediction)
        self.timesteps.append(int(t))

    def __len__(self):
        return len(self.predictions)

    def __getitem__(self, index):
        return self.predictions[index]

    def to_numpy(self) -> dict:
        '''Arrays for an .npz dump: probabilities [L, B, K, H, W] and timesteps [L]'''
        probs = torch.stack([p.softmax(dim=1) for p in self.predictions]).cpu().numpy()
        return {'probabilities': probs.astype(np.float32), 'timesteps': np.asarray(self.timesteps, dtype=np.int64)}


def _onehot(labels: torch.Tensor, num_classes: int, dtype) -> torch.Tensor:
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)


def consensus(trace, config: Optional[ConsensusConfig] = None) -> torch.Tensor:
    """
    Fuse the last k predictions of a trace into one one-hot mask.

    - mean-last-k: mean of softmax probabilities, then per-pixel argmax
    - majority-vote: per-entry argmax, then plurality vote

    k larger than the trace is clamped. Ties go to the lower class index (argmax returns the
    first maximum), so background wins a tie. The background threshold only exists in
    mean-last-k mode.
    """
    config = config or ConsensusConfig()
    predictions = trace.predictions if isinstance(trace, PredictionTrace) else list(trace)
    if not predictions:
        raise ValueError('Cannot take the consensus of an empty prediction trace')
    if config.k < 1:
        raise ValueError(f'Consensus window must be >= 1, got {config.k}')
    window = torch.stack(predictions[-min(config.k, len(predictions)):])
    num_classes = window.shape[2]

    if config.mode == CONSENSUS_MODES[MEAN_LAST_K]:
        probs = window.softmax(dim=2).mean(dim=0)
        labels = probs.argmax(dim=1)
        if config.threshold > 0:
            winner_prob = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
            labels = torch.where(winner_prob < config.threshold, torch.zeros_like(labels), labels)
    elif config.mode == CONSENSUS_MODES[MAJORITY_VOTE]:
        if config.threshold > 0:
            raise ValueError(f'A consensus threshold ({config.threshold}) needs {CONSENSUS_MODES[MEAN_LAST_K]} mode')
        votes = F.one_hot(window.argmax(dim=2), num_classes).sum(dim=0)
        labels = votes.argmax(dim=-1)
    else:
        raise ValueError(f"Unknown consensus mode '{config.mode}', expected one of {list(CONSENSUS_MODES.values())}")
    return _onehot(labels, num_classes, window.dtype)


def _timestep_batch(t: int, batch_size: int, device) -> torch.Tensor:
    return torch.full((batch_size,), t, dtype=torch.long, device=device)


@torch.no_grad()
def sample(image: torch.Tensor, model, schedule: NoiseSchedule, generator: torch.Generator,
           consensus_config: Optional[ConsensusConfig] = None, stride: int = 1):
    """
    Reverse diffusion from x_T ~ N(0, I), conditioned on the image.

    Every step predicts x0 (as logits), appends it to the trace and takes a reverse step with the
    diffusion-domain estimate 2 * softmax - 1. With stride > 1 the strided sub-schedule is used;
    the model is queried at the original timesteps. Noise is drawn on the CPU from 'generator'
    so that results do not depend on the device. Returns the consensus mask and the trace.
    The model's train/eval mode is restored on return.
    """
    was_training = model.training
    model.eval()
    try:
        device = image.device
        sub_schedule, kept = respace(schedule, stride)
        batch_size, (height, width) = image.shape[0], image.shape[-2:]
        shape = (batch_size, model.num_classes, height, width)

        x = torch.randn(shape, generator=generator, dtype=image.dtype).to(device)
        trace = PredictionTrace()
        for i in range(sub_schedule.T, 0, -1):
            t_model = kept[i - 1]
            logits = model(image, x, _timestep_batch(t_model, batch_size, device)).x0_hat
            trace.append(logits, t_model)
            noise = torch.randn(shape, generator=generator, dtype=image.dtype).to(device) if i > 1 else None
            x = reverse_step(x, logits_to_x(logits), i, sub_schedule, noise)
    finally:
        model.train(was_training)
    return consensus(trace, consensus_config), trace


def sample_draws(image: torch.Tensor, model, schedule: NoiseSchedule, n: int, seed: int,
                 consensus_config: Optional[ConsensusConfig] = None, stride: int = 1) -> List[torch.Tensor]:
    """
    n independent sample() runs; draw i uses its own generator seeded with seed + i, so the first
    draws do not depend on n.
    """
    if n < 1:
        raise ValueError(f'Number of draws must be >= 1, got {n}')
    return [sample(image, model, schedule, make_generator(seed + i), consensus_config, stride)[0] for i in range(n)]


def select_best(draws: List[torch.Tensor], gt: torch.Tensor, absent_score: float = 1.0):
    """
    Per batch element, the draw with the highest mean-foreground Dice; the earliest draw wins a tie.
    Returns (best masks, best Dice [B], all Dice scores [n, B]).
    """
    scores = np.stack([batch_dice(draw, gt, absent_score) for draw in draws])
    best = scores.argmax(axis=0)
    masks = torch.stack([draws[j][b] for b, j in enumerate(best)])
    return masks, scores[best, np.arange(scores.shape[1])], scores


def best_of_n(image: torch.Tensor, gt: torch.Tensor, model, schedule: NoiseSchedule, n: int = 4, seed: int = 0,
              consensus_config: Optional[ConsensusConfig] = None, stride: int = 1, return_scores: bool = False):
    """
    Sample n masks per case and keep the one with the best mean-foreground Dice against the ground
    truth. Evaluation only: it needs the ground truth.
    """
    if n < 1:
        raise ValueError(f'best_of_n needs n >= 1, got {n}')
    draws = sample_draws(image, model, schedule, n, seed, consensus_config, stride)
    masks, best, scores = select_best(draws, gt)
    log(f'best of {n}: mean Dice {best.mean():.4f}')
    if return_scores:
        return masks, best, scores
    return masks, best
