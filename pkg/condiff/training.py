"""
Training: hybrid Dice + cross-entropy loss, inverse-frequency sample weights, the training step and the epoch loop.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, RandomSampler, WeightedRandomSampler

from condiff.checkpoint import save_checkpoint
from condiff.config import ConfigError
from condiff.constants import *
from condiff.data import class_pixel_counts, class_presence
from condiff.diffusion import NoiseSchedule, make_schedule, mask_to_x, q_sample
from condiff.model import build_model
from condiff.utils import RunLog, exclusive_device, log, make_generator, resolve_device, seed_everything, state_digest

logger = logging.getLogger('condiff')


class NonFiniteLossError(RuntimeError):
    '''Training produced a NaN or infinite loss; 'snapshot' describes the offending step'''

    def __init__(self, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f'Non-finite loss at step {snapshot.get("step")}: {snapshot}')


def _check_onehot(x0: torch.Tensor):
    if not bool(((x0 == 0) | (x0 == 1)).all()) or not bool((x0.sum(dim=1) == 1).all()):
        raise ValueError('Target mask is not one-hot over the class axis')


def hybrid_loss(logits: torch.Tensor, x0: torch.Tensor, lambda_dice: float = 0.5, lambda_ce: float = 0.5,
                smooth: float = 1.0, return_components: bool = False):
    """
    lambda_dice * (1 - mean per-class soft Dice) + lambda_ce * pixel-wise cross-entropy.

    logits: the denoiser's x0 prediction as class logits [B, K, H, W]
    x0: the one-hot target in {0, 1} (not the diffusion-domain mask)
    Soft Dice per class is (2 * sum(p * g) + smooth) / (sum(p) + sum(g) + smooth), summed over batch and pixels.
    """
    if logits.shape != x0.shape:
        raise ValueError(f'Shape mismatch between prediction {tuple(logits.shape)} and target {tuple(x0.shape)}')
    if lambda_dice < 0 or lambda_ce < 0:
        raise ValueError(f'Loss weights must be >= 0, got lambda_dice={lambda_dice}, lambda_ce={lambda_ce}')
    _check_onehot(x0)

    probs = logits.softmax(dim=1)
    dims = (0, 2, 3)
    intersection = (probs * x0).sum(dim=dims)
    denominator = probs.sum(dim=dims) + x0.sum(dim=dims)
    dice_loss = 1.0 - ((2.0 * intersection + smooth) / (denominator + smooth)).mean()
    ce_loss = F.cross_entropy(logits, x0.argmax(dim=1))

    loss = lambda_dice * dice_loss + lambda_ce * ce_loss
    if return_components:
        return loss, {'loss_dice': float(dice_loss), 'loss_ce': float(ce_loss)}
    return loss


def sample_weights(class_counts, presence, floor_scale: float = 1e-2) -> np.ndarray:
    """
    Per-sample sampling probabilities from inverse class frequencies.

    A sample's raw weight is the sum, over the foreground classes it contains, of 1 / (global pixel
    frequency of that class). Samples without foreground get the floor floor_scale / n; the others
    share the remaining mass in proportion to their raw weights. The result sums to 1.

    Arguments:
    - class_counts: [K] pixel counts over the dataset
    - presence: [n, K] booleans, class k occurs in sample i
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    presence = np.asarray(presence, dtype=bool)
    if presence.ndim != 2 or presence.shape[0] == 0:
        raise ValueError('Cannot compute sample weights of an empty dataset')
    if presence.shape[1] != counts.shape[0]:
        raise ValueError(f'{counts.shape[0]} class counts for presence over {presence.shape[1]} classes')
    used = presence.any(axis=0)
    if (counts[used] <= 0).any():
        raise ValueError(f'Every class present in the dataset needs a positive pixel count, got {counts.tolist()}')

    n = presence.shape[0]
    frequencies = counts / counts.sum()
    inverse = np.zeros_like(frequencies)
    inverse[used] = 1.0 / frequencies[used]
    raw = (presence[:, 1:] * inverse[1:]).sum(axis=1)

    empty = raw == 0
    if empty.all():
        return np.full(n, 1.0 / n)
    floor = floor_scale / n
    weights = np.where(empty, floor, raw / raw[~empty].sum() * (1.0 - floor * empty.sum()))
    return weights


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    device: torch.device
    step: int = 0
    epoch: int = 0
    losses: List[float] = field(default_factory=list)
    last_components: dict = field(default_factory=dict)

    @property
    def running_loss(self) -> float:
        recent = self.losses[-10:]
        return float(np.mean(recent)) if recent else math.nan

    def parameter_digest(self) -> str:
        return state_digest(self.model.state_dict().items())


def init_train_state(config, device: Optional[torch.device] = None, model=None) -> TrainState:
    """
    Seed everything from run.seed and build the model and AdamW optimizer of a RunConfig.
    """
    device = device or resolve_device(config.run.device)
    generator = seed_everything(config.run.seed)
    model = (model or build_model(config)).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.optim.lr, weight_decay=config.optim.weight_decay)
    return TrainState(model=model, optimizer=optimizer, generator=generator, device=device)


def train_step(state: TrainState, batch, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
               loss_config=None, grad_clip: float = 1.0):
    """
    One optimizer update on a batch of (images, one-hot masks).

    t ~ Uniform{1..T} and eps ~ N(0, I) are drawn on the CPU from 'generator' (the state's own by
    default), x_t is formed by q_sample, and the model predicts x0 from the image, x_t and t.
    Returns the state (updated in place) and the loss value.
    """
    generator = generator or state.generator
    image, x0_onehot = (tensor.to(state.device) for tensor in batch)
    dtype = next(state.model.parameters()).dtype
    image, x0_onehot = image.to(dtype), x0_onehot.to(dtype)
    batch_size = image.shape[0]

    t = torch.randint(1, schedule.T + 1, (batch_size,), generator=generator)
    eps = torch.randn(x0_onehot.shape, generator=generator, dtype=dtype).to(state.device)
    t = t.to(state.device)
    x_t = q_sample(mask_to_x(x0_onehot), t, eps, schedule)

    state.model.train()
    output = state.model(image, x_t, t)
    weights = {}
    if loss_config is not None:
        weights = {'lambda_dice': loss_config.lambda_dice, 'lambda_ce': loss_config.lambda_ce,
                   'smooth': loss_config.smooth}
    loss, components = hybrid_loss(output.x0_hat, x0_onehot, return_components=True, **weights)

    value = float(loss)
    if not math.isfinite(value):
        raise NonFiniteLossError({
            'step': state.step,
            'epoch': state.epoch,
            'timesteps': t.tolist(),
            'loss': value,
            **components,
        })

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), grad_clip)
    state.optimizer.step()

    state.step += 1
    state.losses.append(value)
    state.last_components = components
    return state, value


def make_loader(dataset, config, generator: torch.Generator) -> DataLoader:
    """
    DataLoader over the training set, drawing samples through the weighted sampler when enabled.
    """
    if config.optim.weighted_sampler:
        weights = sample_weights(class_pixel_counts(dataset), class_presence(dataset), config.optim.floor_scale)
        sampler = WeightedRandomSampler(torch.as_tensor(weights, dtype=torch.float64), num_samples=len(dataset),
                                        replacement=True, generator=generator)
    else:
        sampler = RandomSampler(dataset, generator=generator)
    return DataLoader(dataset, batch_size=config.optim.batch_size, sampler=sampler, num_workers=0)


def fit(config, train_set, val_set=None, output_dir: Optional[str] = None, run_log: Optional[RunLog] = None,
        validate_fn=None):
    """
    Train for optim.epochs epochs and return the final TrainState and the run log.

    Every step appends (step, epoch, loss, loss_dice, loss_ce, lr) to the run log. When a validation
    set and 'validate_fn(model, val_set)' are given, validation scores are logged every
    optim.validate_every epochs and after the last one. With an output directory, checkpoints are
    written every optim.checkpoint_every epochs.
    """
    errors = config.validate()
    if errors:
        raise ConfigError(errors)
    if len(train_set) == 0 and config.optim.epochs > 0:
        raise ValueError('Cannot train on an empty dataset')
    run_log = run_log if run_log is not None else RunLog()

    with exclusive_device('training'):
        state = init_train_state(config)
        if config.optim.epochs == 0:
            log('zero epochs requested, returning the initialized state')
            return state, run_log

        schedule = make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
        loader = make_loader(train_set, config, make_generator(config.run.seed + 1))
        optim = config.optim
        for epoch in range(1, optim.epochs + 1):
            state.epoch = epoch
            epoch_losses = []
            for batch in loader:
                state, value = train_step(state, batch, schedule, loss_config=config.loss, grad_clip=optim.grad_clip)
                epoch_losses.append(value)
                run_log.append(step=state.step, epoch=epoch, loss=value, lr=optim.lr, **state.last_components)

            record = {'epoch': epoch, 'step': state.step, 'epoch_loss': float(np.mean(epoch_losses))}
            last = epoch == optim.epochs
            if val_set is not None and len(val_set) and validate_fn is not None and (
                    last or (optim.validate_every and epoch % optim.validate_every == 0)):
                record.update({f'val_{key}': score for key, score in validate_fn(state.model, val_set).items()})
            run_log.append(**record)
            logging_msg = ', '.join(f'{key} {value:.4f}' if isinstance(value, float) else f'{key} {value}'
                                    for key, value in record.items())
            log(logging_msg, logger=logger.info)

            if output_dir and optim.checkpoint_every and epoch % optim.checkpoint_every == 0:
                save_checkpoint(state.model, config, os.path.join(output_dir, f'checkpoint_epoch{epoch:03d}.cdck'))
    return state, run_log
