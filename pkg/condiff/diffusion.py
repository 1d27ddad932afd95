"""
Noise schedule and closed-form diffusion math over segmentation masks.

Timesteps are 1-based throughout: t = 1 is the least corrupted state, t = T the most.
Schedules are stored in double precision; coefficients are cast to the dtype of the tensors they
multiply, so the training path can run in single precision.

Masks live in two domains:
- one-hot class masks in {0, 1}, used by losses and metrics
- diffusion states in [-1, 1] for clean masks (unbounded once noised), x = 2 * onehot - 1
"""

from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from condiff.utils import log

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-timestep variances and their derived products. Index i of every tensor holds timestep i + 1.
    Immutable after construction, so a schedule can be shared between threads.
    """
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    @property
    def alpha_bars_prev(self) -> torch.Tensor:
        # alpha_bar_0 := 1 so that the posterior is defined at t = 1
        return torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars[:-1]])

    @property
    def sigmas(self) -> torch.Tensor:
        return self.betas.sqrt()


def _build(betas: torch.Tensor) -> NoiseSchedule:
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Linear variance schedule from beta_start to beta_end (both inclusive) over T steps.
    """
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        raise ValueError(f'Number of diffusion steps must be a positive integer, got {T!r}')
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f'Beta bounds must lie in (0, 1), got beta_start={beta_start}, beta_end={beta_end}')
    if beta_start > beta_end:
        raise ValueError(f'beta_start ({beta_start}) must not exceed beta_end ({beta_end})')

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    schedule = _build(betas)
    log(f'linear schedule with T={T}, betas in [{beta_start}, {beta_end}], '
        f'final alpha_bar {float(schedule.alpha_bars[-1]):.3e}')
    return schedule


def respace(schedule: NoiseSchedule, stride: int):
    """
    Strided sub-schedule for faster sampling.

    Keeps every 'stride'-th timestep counted back from T (T is always kept) and recomputes the betas
    from consecutive alpha_bar ratios, so that alpha_bars of the sub-schedule equal the original
    alpha_bars at the kept timesteps. Returns the sub-schedule and the list of original timesteps,
    where entry i - 1 is the original timestep of sub-schedule step i.
    """
    if stride < 1:
        raise ValueError(f'Sampling stride must be >= 1, got {stride}')
    if stride == 1:
        return schedule, list(range(1, schedule.T + 1))

    kept = sorted(range(schedule.T, 0, -stride))
    alpha_bars = schedule.alpha_bars[[t - 1 for t in kept]]
    prev = torch.cat([alpha_bars.new_ones(1), alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / prev
    respaced = NoiseSchedule(betas=betas, alphas=1.0 - betas, alpha_bars=alpha_bars)
    log(f'respaced {schedule.T} steps to {respaced.T} with stride {stride}')
    return respaced, kept


def _check_timestep(t: Timestep, schedule: NoiseSchedule):
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ValueError('Empty timestep tensor')
        low, high = int(t.min()), int(t.max())
    else:
        low = high = int(t)
    if low < 1 or high > schedule.T:
        raise ValueError(f'Timestep out of range: got [{low}, {high}], expected within [1, {schedule.T}]')


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, names: str):
    if a.shape != b.shape:
        raise ValueError(f'Shape mismatch between {names}: {tuple(a.shape)} vs {tuple(b.shape)}')


def _extract(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """
    Gather values at timestep(s) t and shape them to broadcast against 'like' ([batch, ...]).
    A tensor t holds one timestep per batch element.
    """
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        out = values.to(like.device)[t.to(like.device).long() - 1]
        out = out.reshape(-1, *([1] * (like.dim() - 1)))
    else:
        out = values[int(t) - 1]
    return out.to(like.dtype) if isinstance(out, torch.Tensor) else out


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """
    Forward corruption: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    """
    _check_timestep(t, schedule)
    _check_same_shape(x0, eps, 'x0 and eps')
    signal = _extract(schedule.alpha_bars.sqrt(), t, x0)
    noise = _extract((1.0 - schedule.alpha_bars).sqrt(), t, x0)
    return signal * x0 + noise * eps


def posterior_coefficients(schedule: NoiseSchedule):
    """
    Coefficients of x_t and x0_hat in the reverse mean, one entry per timestep.
    (1 - alphas) and (1 - alpha_bars) are used rather than the betas so that at t = 1 the x0_hat
    coefficient is exactly 1 and the x_t coefficient exactly 0.
    """
    denom = 1.0 - schedule.alpha_bars
    coef_xt = schedule.alphas.sqrt() * (1.0 - schedule.alpha_bars_prev) / denom
    coef_x0 = schedule.alpha_bars_prev.sqrt() * (1.0 - schedule.alphas) / denom
    return coef_xt, coef_x0


def posterior_mean(x_t: torch.Tensor, x0_hat: torch.Tensor, t: Timestep, schedule: NoiseSchedule) -> torch.Tensor:
    _check_timestep(t, schedule)
    _check_same_shape(x_t, x0_hat, 'x_t and x0_hat')
    coef_xt, coef_x0 = posterior_coefficients(schedule)
    return _extract(coef_xt, t, x_t) * x_t + _extract(coef_x0, t, x_t) * x0_hat


def reverse_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: Timestep, schedule: NoiseSchedule,
                 noise: torch.Tensor) -> torch.Tensor:
    """
    One stochastic reverse step: posterior mean plus sigma_t * noise, with sigma_t = sqrt(beta_t).
    No noise is added at t = 1; per batch element when t is a tensor.
    """
    mean = posterior_mean(x_t, x0_hat, t, schedule)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        _check_same_shape(mean, noise, 'posterior mean and noise')
        sigma = _extract(schedule.sigmas, t, mean)
        keep = (t.to(mean.device) > 1).to(mean.dtype).reshape(sigma.shape)
        return mean + keep * sigma * noise
    if int(t) == 1:
        return mean
    _check_same_shape(mean, noise, 'posterior mean and noise')
    return mean + _extract(schedule.sigmas, t, mean) * noise


def mask_to_x(onehot: torch.Tensor) -> torch.Tensor:
    '''One-hot mask in {0, 1} to the diffusion domain [-1, 1]'''
    return onehot * 2.0 - 1.0


def x_to_mask(x: torch.Tensor) -> torch.Tensor:
    '''Diffusion-domain state to a one-hot mask: (x + 1) / 2, then per-pixel argmax over classes'''
    probs = (x + 1.0) / 2.0
    return F.one_hot(probs.argmax(dim=1), num_classes=x.shape[1]).permute(0, 3, 1, 2).to(x.dtype)


def logits_to_x(logits: torch.Tensor) -> torch.Tensor:
    '''Class logits predicted by the denoiser to a diffusion-domain x0 estimate, 2 * softmax - 1'''
    return 2.0 * logits.softmax(dim=1) - 1.0


def timestep_embed(t: Timestep, dim: int) -> torch.Tensor:
    """
    Sinusoidal timestep encoding: the first dim / 2 entries are sin(t * w_k), the last dim / 2 are
    cos(t * w_k), with w_k = 10000 ** (-2k / dim). A scalar t gives a [dim] vector, a [B] tensor gives [B, dim].
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f'Timestep embedding dimension must be a positive even number, got {dim}')
    scalar = not isinstance(t, torch.Tensor) or t.dim() == 0
    t = torch.as_tensor(t).reshape(-1)
    if bool((t < 0).any()):
        raise ValueError(f'Timesteps must be non-negative, got {t.tolist()}')
    dtype = t.dtype if t.is_floating_point() else torch.float32
    k = torch.arange(dim // 2, dtype=torch.float64, device=t.device)
    freqs = torch.pow(10000.0, -2.0 * k / dim).to(dtype)
    angles = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([angles.sin(), angles.cos()], dim=-1)
    return emb[0] if scalar else emb
