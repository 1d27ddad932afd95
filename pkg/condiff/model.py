"""
The conditional segmentation model: PVT adapter plus UNet denoiser.
"""

import torch
import torch.nn as nn

from condiff.adapter import AdapterConfig, PVTAdapter
from condiff.constants import *
from condiff.denoiser import DenoiserConfig, DenoiserOutput, UNetDenoiser
from condiff.utils import log


class ConditionalSegmentationModel(nn.Module):
    """
    x0_hat = D([Enc(x_t, t) fused with E(I, x_t, t)], t)

    In fusion mode 'none' the adapter is not built: the denoiser sees the noised mask only,
    which is the unconditioned baseline of the conditioning ablation. It is equivalent to the
    additive mode with the adapter output zeroed, except that its parameter count holds no adapter.
    """

    def __init__(self, adapter_config: AdapterConfig, denoiser_config: DenoiserConfig):
        super().__init__()
        if list(adapter_config.stage_strides) != list(denoiser_config.strides):
            raise ValueError(f'Adapter strides {adapter_config.stage_strides} and denoiser strides '
                             f'{denoiser_config.strides} must agree')
        if adapter_config.mask_channels != denoiser_config.num_classes:
            raise ValueError(f'Adapter mask channels ({adapter_config.mask_channels}) and denoiser classes '
                             f'({denoiser_config.num_classes}) must agree')
        self.fusion_mode = adapter_config.fusion_mode
        self.conditioned = self.fusion_mode != FUSION_MODES[NONE]
        self.adapter = PVTAdapter(adapter_config) if self.conditioned else None
        self.denoiser = UNetDenoiser(denoiser_config, list(adapter_config.stage_dims), self.fusion_mode)

    @property
    def num_classes(self) -> int:
        return self.denoiser.config.num_classes

    def condition(self, image: torch.Tensor, x_t: torch.Tensor, t):
        if not self.conditioned:
            return None
        return self.adapter(image, x_t, t)

    def forward(self, image: torch.Tensor, x_t: torch.Tensor, t) -> DenoiserOutput:
        return self.denoiser.predict_x0(x_t, self.condition(image, x_t, t), t)


def build_model(config) -> ConditionalSegmentationModel:
    '''Build the model described by a RunConfig'''
    model = ConditionalSegmentationModel(config.adapter, config.denoiser)
    log(f'model built in fusion mode {model.fusion_mode} with '
        f'{sum(p.numel() for p in model.parameters())} parameters')
    return model
