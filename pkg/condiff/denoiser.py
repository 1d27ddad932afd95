"""
UNet-style denoiser predicting the clean mask from a noisy one.

The encoder mirrors the adapter pyramid scale for scale (same strides), so conditioning features
can be fused into every encoder output before it is used as a skip connection. A full-resolution
stem feature is kept as the last skip. The decoder upsamples with nearest neighbours and merges
skips by concatenation. The network predicts x0 directly, as unnormalized class logits.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from condiff.adapter import FeatureFusion, PyramidFeatures
from condiff.constants import *
from condiff.diffusion import timestep_embed
from condiff.utils import check_divisible, log

__all__ = ['DenoiserConfig', 'DenoiserOutput', 'UNetDenoiser', 'timestep_embed']


@dataclass
class DenoiserConfig:
    widths: List[int] = field(default_factory=lambda: [32, 64, 160, 256])
    strides: List[int] = field(default_factory=lambda: [4, 2, 2, 2])
    time_dim: int = 64
    num_classes: int = 4
    groups: int = 8

    @property
    def num_scales(self) -> int:
        return len(self.widths)

    def validate(self) -> List[str]:
        errors = []
        if len(self.widths) != len(self.strides):
            errors.append(f'denoiser: {len(self.widths)} widths for {len(self.strides)} strides')
        if len(self.widths) < 2:
            errors.append(f'denoiser: at least 2 scales are required, got {len(self.widths)}')
        if any(stride < 2 for stride in self.strides):
            errors.append(f'denoiser: every stride must be >= 2, got {self.strides}')
        if self.groups < 1 or any(width % self.groups != 0 for width in self.widths):
            errors.append(f'denoiser: group count {self.groups} must divide every width {self.widths}')
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            errors.append(f'denoiser: time_dim must be a positive even number, got {self.time_dim}')
        if self.num_classes < 2:
            errors.append(f'denoiser: need at least 2 classes, got {self.num_classes}')
        return errors


@dataclass
class DenoiserOutput:
    '''Predicted clean mask (class logits, shape of x_t) and the per-scale encoder features z_t'''
    x0_hat: torch.Tensor
    encoder_features: List[torch.Tensor]


class ResBlock(nn.Module):
    """
    GroupNorm - SiLU - conv, timestep projection added, GroupNorm - SiLU - conv, plus a residual path
    """

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.stride = stride
        kernel = 2 * stride - 1
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2)

    def forward(self, x):
        check_divisible(x.shape[-2], self.stride, 'denoiser downsampling height')
        check_divisible(x.shape[-1], self.stride, 'denoiser downsampling width')
        return self.conv(x)


class UNetDenoiser(nn.Module):

    def __init__(self, config: DenoiserConfig, condition_channels: Optional[List[int]] = None,
                 fusion_mode: str = FUSION_MODES[ADDITIVE]):
        super().__init__()
        errors = config.validate()
        if errors:
            raise ValueError('; '.join(errors))
        if condition_channels is None:
            condition_channels = list(config.widths)
        if len(condition_channels) != config.num_scales:
            raise ValueError(f'{len(condition_channels)} conditioning scales for a {config.num_scales}-scale encoder')
        self.config = config
        self.fusion_mode = fusion_mode
        widths, groups, time_dim = config.widths, config.groups, config.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim * 4),
            nn.SiLU(),
            nn.Linear(time_dim * 4, time_dim),
        )
        self.stem = nn.Conv2d(config.num_classes, widths[0], 3, padding=1)
        self.stem_block = ResBlock(widths[0], widths[0], time_dim, groups)

        in_widths = [widths[0]] + widths[:-1]
        self.down = nn.ModuleList([
            Downsample(in_width, width, stride) for in_width, width, stride in zip(in_widths, widths, config.strides)
        ])
        self.enc_blocks = nn.ModuleList([ResBlock(width, width, time_dim, groups) for width in widths])
        self.fusions = nn.ModuleList([
            FeatureFusion(width, c_channels, fusion_mode) for width, c_channels in zip(widths, condition_channels)
        ])

        # decoder level s merges the upsampled level s + 1 with fused skip s; the last level merges the stem
        self.dec_blocks = nn.ModuleList([
            ResBlock(widths[s + 1] + widths[s], widths[s], time_dim, groups) for s in range(config.num_scales - 1)
        ])
        self.final_block = ResBlock(widths[0] * 2, widths[0], time_dim, groups)
        self.head = nn.Sequential(
            nn.GroupNorm(groups, widths[0]),
            nn.SiLU(),
            nn.Conv2d(widths[0], config.num_classes, 3, padding=1),
        )
        log(f'denoiser with widths {widths}, fusion mode {fusion_mode}')

    def _temb(self, t, x):
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        return self.time_mlp(timestep_embed(t, self.config.time_dim).to(x.dtype))

    def _encode(self, x_t, temb):
        if x_t.dim() != 4 or x_t.shape[1] != self.config.num_classes:
            raise ValueError(f'Expected x_t of shape [B, {self.config.num_classes}, H, W], got {tuple(x_t.shape)}')
        stem = self.stem_block(self.stem(x_t), temb)
        features = []
        h = stem
        for down, block in zip(self.down, self.enc_blocks):
            h = block(down(h), temb)
            features.append(h)
        return stem, features

    def encode(self, x_t: torch.Tensor, t) -> List[torch.Tensor]:
        '''Per-scale encoder features z_t, one per adapter stage'''
        return self._encode(x_t, self._temb(t, x_t))[1]

    def decode(self, stem, fused, temb):
        h = fused[-1]
        for s in reversed(range(self.config.num_scales - 1)):
            h = F.interpolate(h, scale_factor=self.config.strides[s + 1], mode='nearest')
            h = self.dec_blocks[s](torch.cat([h, fused[s]], dim=1), temb)
        h = F.interpolate(h, scale_factor=self.config.strides[0], mode='nearest')
        h = self.final_block(torch.cat([h, stem], dim=1), temb)
        return self.head(h)

    def predict_x0(self, x_t: torch.Tensor, c: Optional[PyramidFeatures], t) -> DenoiserOutput:
        """
        x0_hat = D([Enc(x_t, t) fused with c], t). With c None, or in fusion mode 'none', nothing is fused.
        """
        temb = self._temb(t, x_t)
        stem, features = self._encode(x_t, temb)
        if c is not None and self.fusion_mode != FUSION_MODES[NONE]:
            if len(c) != len(features):
                raise ValueError(f'Conditioning pyramid has {len(c)} stages, the encoder has {len(features)} scales')
            for s, (z, cond) in enumerate(zip(features, c.stages)):
                if z.shape[-2:] != cond.shape[-2:]:
                    raise ValueError(f'Scale {s + 1}: encoder grid {tuple(z.shape[-2:])} does not match '
                                     f'conditioning grid {tuple(cond.shape[-2:])}')
            fused = [fusion(z, cond) for fusion, z, cond in zip(self.fusions, features, c.stages)]
        else:
            fused = features
        return DenoiserOutput(x0_hat=self.decode(stem, fused, temb), encoder_features=features)

    def forward(self, x_t, c, t):
        return self.predict_x0(x_t, c, t)
