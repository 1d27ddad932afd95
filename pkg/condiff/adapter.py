"""
Pyramid vision transformer adapter.

The adapter turns the conditioning image into a pyramid of feature maps that is fused into the
denoiser at every scale. At stage one the noised mask x_t and the timestep are injected: the mask
gets its own overlapping patch embedding whose output is added to the image tokens, and a linear
map of the sinusoidal timestep embedding is added to every token. Later stages are plain
transformer stages with spatial-reduction attention.

Positional information only comes from the overlapping convolutional patch embeddings.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
from einops import rearrange
from timm.layers import trunc_normal_

from condiff.constants import *
from condiff.diffusion import timestep_embed
from condiff.utils import check_divisible, cumulative_strides, log


@dataclass
class AdapterConfig:
    stage_dims: List[int] = field(default_factory=lambda: [32, 64, 160, 256])
    stage_strides: List[int] = field(default_factory=lambda: [4, 2, 2, 2])
    reduction_ratios: List[int] = field(default_factory=lambda: [8, 4, 2, 1])
    num_heads: List[int] = field(default_factory=lambda: [1, 2, 5, 8])
    depths: List[int] = field(default_factory=lambda: [1, 1, 1, 1])
    mlp_ratio: float = 4.0
    in_channels: int = 1
    mask_channels: int = 4
    time_dim: int = 64
    fusion_mode: str = FUSION_MODES[ADDITIVE]

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def head_dims(self) -> List[int]:
        return [dim // heads for dim, heads in zip(self.stage_dims, self.num_heads)]

    def grids(self, resolution: int) -> List[int]:
        '''Side length of every stage grid for a square input of the given resolution'''
        return [resolution // stride for stride in cumulative_strides(self.stage_strides)]

    def validate(self, resolution: Optional[int] = None) -> List[str]:
        """
        Return a list of every problem found; an empty list means the configuration is valid.
        With a resolution, reduction ratios are also checked against the stage grids.
        """
        errors = []
        lengths = {len(self.stage_dims), len(self.stage_strides), len(self.reduction_ratios),
                   len(self.num_heads), len(self.depths)}
        if len(lengths) != 1:
            errors.append('adapter: stage_dims, stage_strides, reduction_ratios, num_heads and depths '
                          'must all have one entry per stage')
            return errors
        if self.num_stages < 2:
            errors.append(f'adapter: at least 2 stages are required, got {self.num_stages}')
        for s, (dim, heads) in enumerate(zip(self.stage_dims, self.num_heads)):
            if heads < 1 or dim % heads != 0:
                errors.append(f'adapter: stage {s + 1} dim {dim} is not divisible by {heads} heads')
        if any(b < a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            errors.append(f'adapter: stage dims must be non-decreasing, got {self.stage_dims}')
        if any(stride < 2 for stride in self.stage_strides):
            errors.append(f'adapter: every stage stride must be >= 2, got {self.stage_strides}')
        if any(r < 1 for r in self.reduction_ratios):
            errors.append(f'adapter: reduction ratios must be >= 1, got {self.reduction_ratios}')
        if any(depth < 1 for depth in self.depths):
            errors.append(f'adapter: every stage needs at least one block, got depths {self.depths}')
        if self.mlp_ratio <= 0:
            errors.append(f'adapter: mlp_ratio must be positive, got {self.mlp_ratio}')
        if self.in_channels < 1 or self.mask_channels < 2:
            errors.append(f'adapter: need in_channels >= 1 and mask_channels >= 2, '
                          f'got {self.in_channels} and {self.mask_channels}')
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            errors.append(f'adapter: time_dim must be a positive even number, got {self.time_dim}')
        if self.fusion_mode not in FUSION_MODES.values():
            errors.append(f"adapter: fusion_mode '{self.fusion_mode}' is not one of {list(FUSION_MODES.values())}")
        if resolution is not None and not errors:
            total = math.prod(self.stage_strides)
            if resolution % total != 0:
                errors.append(f'adapter: resolution {resolution} is not divisible by the cumulative stride {total}')
            else:
                for s, (grid, r) in enumerate(zip(self.grids(resolution), self.reduction_ratios)):
                    if grid % r != 0:
                        errors.append(f'adapter: reduction ratio {r} does not divide the stage {s + 1} '
                                      f'grid {grid}x{grid} at resolution {resolution}')
        return errors


@dataclass
class PyramidFeatures:
    """
    Multi-scale conditioning features, stage s of shape [batch, Ch_s, H_s, W_s].
    """
    stages: List[torch.Tensor]
    reduction_ratios: List[int]

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, index):
        return self.stages[index]

    @property
    def shapes(self) -> List[tuple]:
        return [tuple(stage.shape[1:]) for stage in self.stages]

    def zeros_like(self) -> 'PyramidFeatures':
        return PyramidFeatures([torch.zeros_like(stage) for stage in self.stages], list(self.reduction_ratios))


def _init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels // module.groups
        nn.init.normal_(module.weight, 0.0, math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class OverlapPatchEmbed(nn.Module):
    """
    Overlapping patch embedding: a strided convolution with kernel 2 * stride - 1, then LayerNorm.
    For inputs divisible by the stride the output grid is exactly H / stride x W / stride.
    """

    def __init__(self, in_channels: int, dim: int, stride: int):
        super().__init__()
        self.stride = stride
        kernel = 2 * stride - 1
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor):
        H, W = x.shape[-2:]
        check_divisible(H, self.stride, 'patch embedding height')
        check_divisible(W, self.stride, 'patch embedding width')
        x = self.proj(x)
        grid = tuple(x.shape[-2:])
        tokens = self.norm(rearrange(x, 'b c h w -> b (h w) c'))
        return tokens, grid


class SpatialReductionAttention(nn.Module):
    """
    Multi-head attention whose keys and values come from a spatially reduced token grid.
    R(.) aggregates non-overlapping r x r patches with a strided convolution and normalizes the result,
    so N query tokens attend to N / r^2 key/value tokens. At r = 1, R is the identity and the layer is
    standard dense multi-head self-attention.
    """

    def __init__(self, dim: int, num_heads: int, reduction_ratio: int = 1, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f'dim {dim} should be divisible by num_heads {num_heads}.')
        if reduction_ratio < 1:
            raise ValueError(f'reduction ratio must be >= 1, got {reduction_ratio}')
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.reduction_ratio = reduction_ratio

        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, dim * 2, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        if reduction_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=reduction_ratio, stride=reduction_ratio)
            self.norm = nn.LayerNorm(dim)

    def reduce(self, tokens: torch.Tensor, H: int, W: int) -> torch.Tensor:
        if self.reduction_ratio == 1:
            return tokens
        x = rearrange(tokens, 'b (h w) c -> b c h w', h=H, w=W)
        x = rearrange(self.sr(x), 'b c h w -> b (h w) c')
        return self.norm(x)

    def forward(self, tokens: torch.Tensor, H: int, W: int, return_attention: bool = False):
        B, N, C = tokens.shape
        if N != H * W:
            raise ValueError(f'Token count {N} does not match the grid {H}x{W}')
        check_divisible(H, self.reduction_ratio, 'attention grid height')
        check_divisible(W, self.reduction_ratio, 'attention grid width')

        q = rearrange(self.q(tokens), 'b n (h d) -> b h n d', h=self.num_heads)
        k, v = rearrange(self.kv(self.reduce(tokens, H, W)), 'b m (two h d) -> two b h m d',
                         two=2, h=self.num_heads)

        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = self.proj(rearrange(attn @ v, 'b h n d -> b n (h d)'))
        if return_attention:
            return out, attn
        return out


class Mlp(nn.Module):

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class PVTBlock(nn.Module):

    def __init__(self, dim: int, num_heads: int, reduction_ratio: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, num_heads, reduction_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, H, W):
        x = x + self.attn(self.norm1(x), H, W)
        return x + self.mlp(self.norm2(x))


class PVTStage(nn.Module):
    """
    Patch embedding followed by transformer blocks; maps [B, C_in, H, W] to [B, dim, H / stride, W / stride].
    """

    def __init__(self, in_channels: int, dim: int, stride: int, num_heads: int, reduction_ratio: int,
                 depth: int, mlp_ratio: float):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_channels, dim, stride)
        self.blocks = nn.ModuleList([PVTBlock(dim, num_heads, reduction_ratio, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def transform(self, tokens: torch.Tensor, grid) -> torch.Tensor:
        H, W = grid
        for block in self.blocks:
            tokens = block(tokens, H, W)
        return rearrange(self.norm(tokens), 'b (h w) c -> b c h w', h=H, w=W)

    def forward(self, x):
        tokens, grid = self.patch_embed(x)
        return self.transform(tokens, grid)


class PVTAdapter(nn.Module):
    """
    Conditioning network c = E(I, x_t, t), returning one feature map per stage.
    """

    def __init__(self, config: AdapterConfig):
        super().__init__()
        errors = config.validate()
        if errors:
            raise ValueError('; '.join(errors))
        self.config = config
        in_dims = [config.in_channels] + config.stage_dims[:-1]
        self.stages = nn.ModuleList([
            PVTStage(in_dim, dim, stride, heads, r, depth, config.mlp_ratio)
            for in_dim, dim, stride, heads, r, depth in zip(
                in_dims, config.stage_dims, config.stage_strides, config.num_heads,
                config.reduction_ratios, config.depths)
        ])
        dim = config.stage_dims[0]
        self.mask_embed = OverlapPatchEmbed(config.mask_channels, dim, config.stage_strides[0])
        self.mask_proj = nn.Linear(dim, dim)
        self.time_proj = nn.Linear(config.time_dim, dim)

        self.apply(_init_weights)
        # the noised-mask injection starts as a no-op
        nn.init.zeros_(self.mask_proj.weight)
        nn.init.zeros_(self.mask_proj.bias)
        log(f'adapter with stage dims {config.stage_dims} and reduction ratios {config.reduction_ratios}')

    def patch_embed(self, x: torch.Tensor, stage: int):
        '''Tokens [B, N_s, Ch_s] and grid (H_s, W_s) of the given 0-based stage'''
        return self.stages[stage].patch_embed(x)

    def forward(self, image: torch.Tensor, x_t: Optional[torch.Tensor] = None,
                t: Optional[torch.Tensor] = None) -> PyramidFeatures:
        if image.dim() != 4 or image.shape[1] != self.config.in_channels:
            raise ValueError(f'Expected image of shape [B, {self.config.in_channels}, H, W], got {tuple(image.shape)}')
        if x_t is not None:
            if x_t.shape[0] != image.shape[0] or x_t.shape[-2:] != image.shape[-2:]:
                raise ValueError(f'Image {tuple(image.shape)} and x_t {tuple(x_t.shape)} must share batch and '
                                 'spatial dims')
            if x_t.shape[1] != self.config.mask_channels:
                raise ValueError(f'x_t must have {self.config.mask_channels} channels, got {x_t.shape[1]}')

        tokens, grid = self.patch_embed(image, 0)
        if x_t is not None:
            mask_tokens, _ = self.mask_embed(x_t)
            tokens = tokens + self.mask_proj(mask_tokens)
        if t is not None:
            t = torch.as_tensor(t, device=image.device).reshape(-1)
            if bool((t < 0).any()):
                raise ValueError(f'Timesteps must be non-negative, got {t.tolist()}')
            if t.numel() == 1:
                t = t.expand(image.shape[0])
            temb = timestep_embed(t, self.config.time_dim).to(tokens.dtype)
            tokens = tokens + self.time_proj(temb)[:, None, :]

        x = self.stages[0].transform(tokens, grid)
        outputs = [x]
        for stage in self.stages[1:]:
            x = stage(x)
            outputs.append(x)
        return PyramidFeatures(outputs, list(self.config.reduction_ratios))


class FeatureFusion(nn.Module):
    """
    Fuses encoder features z with conditioning features c of the same spatial size.

    - additive: z + P(c), P a bias-free 1x1 convolution, identity-initialized when the channel counts agree
    - concat: Q([z, c]), Q a bias-free 1x1 convolution back to z's channels, identity on the z part at init
    - none: z unchanged, c is ignored

    The output always has z's shape, whatever the mode.
    """

    def __init__(self, z_channels: int, c_channels: int, mode: str = FUSION_MODES[ADDITIVE]):
        super().__init__()
        if mode not in FUSION_MODES.values():
            raise ValueError(f"Unknown fusion mode '{mode}', expected one of {list(FUSION_MODES.values())}")
        self.mode = mode
        self.z_channels = z_channels
        self.c_channels = c_channels
        if mode == FUSION_MODES[ADDITIVE]:
            self.proj = nn.Conv2d(c_channels, z_channels, kernel_size=1, bias=False)
            if c_channels == z_channels:
                nn.init.eye_(self.proj.weight.view(z_channels, c_channels))
            else:
                trunc_normal_(self.proj.weight, std=.02)
        elif mode == FUSION_MODES[CONCAT]:
            self.proj = nn.Conv2d(z_channels + c_channels, z_channels, kernel_size=1, bias=False)
            weight = self.proj.weight.data.view(z_channels, z_channels + c_channels)
            trunc_normal_(weight, std=.02)
            weight[:, :z_channels] = torch.eye(z_channels)

    def combine(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        '''Pre-projection tensor: channel concatenation in concat mode, the raw c otherwise'''
        if z.shape[0] != c.shape[0] or z.shape[-2:] != c.shape[-2:]:
            raise ValueError(f'Cannot fuse features of shape {tuple(z.shape)} and {tuple(c.shape)}: '
                             'batch and spatial dims must agree')
        if c.shape[1] != self.c_channels:
            raise ValueError(f'Expected {self.c_channels} conditioning channels, got {c.shape[1]}')
        if self.mode == FUSION_MODES[CONCAT]:
            return torch.cat([z, c], dim=1)
        return c

    def forward(self, z: torch.Tensor, c: Optional[torch.Tensor]) -> torch.Tensor:
        if self.mode == FUSION_MODES[NONE] or c is None:
            return z
        combined = self.combine(z, c)
        if self.mode == FUSION_MODES[ADDITIVE]:
            return z + self.proj(combined)
        return self.proj(combined)
