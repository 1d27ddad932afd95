import random

import pytest
import torch

from condiff.adapter import (AdapterConfig, FeatureFusion, OverlapPatchEmbed, PVTAdapter, PyramidFeatures,
                             SpatialReductionAttention)
from condiff.constants import *


@pytest.fixture
def adapter():
    torch.manual_seed(0)
    return PVTAdapter(AdapterConfig()).eval()


class TestAdapterConfig:

    def test_defaults_are_valid(self):
        assert AdapterConfig().validate(64) == []
        assert AdapterConfig().grids(64) == [16, 8, 4, 2]

    def test_reports_every_problem(self):
        config = AdapterConfig(num_heads=[3, 2, 5, 8], stage_strides=[1, 2, 2, 2], time_dim=7)
        errors = config.validate()
        assert len(errors) == 3

    def test_reduction_ratio_must_divide_grid(self):
        errors = AdapterConfig(reduction_ratios=[16, 4, 2, 1]).validate(32)
        assert any('reduction ratio 16' in error for error in errors)

    def test_length_mismatch(self):
        assert AdapterConfig(depths=[1, 1]).validate()


class TestOverlapPatchEmbed:

    def test_grid(self):
        embed = OverlapPatchEmbed(1, 32, 4)
        tokens, grid = embed(torch.randn(2, 1, 32, 32))
        assert grid == (8, 8)
        assert tokens.shape == (2, 64, 32)

    def test_indivisible_input(self):
        with pytest.raises(ValueError):
            OverlapPatchEmbed(1, 32, 4)(torch.randn(1, 1, 30, 30))


class TestSpatialReductionAttention:

    @pytest.mark.parametrize('case', range(20))
    def test_dense_at_ratio_one(self, case):
        rng = random.Random(case)
        heads, head_dim = rng.choice([1, 2, 4]), rng.choice([2, 4, 8])
        H, W, B = rng.randint(1, 6), rng.randint(1, 6), rng.randint(1, 3)
        dim, N = heads * head_dim, H * W
        torch.manual_seed(case)
        attn = SpatialReductionAttention(dim, heads, 1).double().eval()
        tokens = torch.randn(B, N, dim, dtype=torch.float64)

        q = attn.q(tokens).reshape(B, N, heads, head_dim).transpose(1, 2)
        k, v = attn.kv(tokens).reshape(B, N, 2, heads, head_dim).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / head_dim ** 0.5, dim=-1)
        expected = attn.proj((weights @ v).transpose(1, 2).reshape(B, N, dim))

        torch.testing.assert_close(attn(tokens, H, W), expected, atol=1e-10, rtol=1e-10)

    @pytest.mark.parametrize('ratio', [1, 2, 4])
    def test_attention_shape(self, ratio):
        attn = SpatialReductionAttention(8, 2, ratio)
        out, weights = attn(torch.randn(3, 64, 8), 8, 8, return_attention=True)
        assert out.shape == (3, 64, 8)
        assert weights.shape == (3, 2, 64, 64 // ratio ** 2)
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(3, 2, 64))

    def test_single_token_returns_value_projection(self):
        torch.manual_seed(0)
        attn = SpatialReductionAttention(8, 2, 1)
        tokens = torch.randn(3, 1, 8)
        _, v = attn.kv(tokens).chunk(2, dim=-1)
        torch.testing.assert_close(attn(tokens, 1, 1), attn.proj(v))

    def test_token_grid_mismatch(self):
        with pytest.raises(ValueError):
            SpatialReductionAttention(8, 1, 1)(torch.randn(1, 15, 8), 4, 4)

    def test_indivisible_grid(self):
        with pytest.raises(ValueError):
            SpatialReductionAttention(8, 1, 4)(torch.randn(1, 36, 8), 6, 6)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            SpatialReductionAttention(10, 3, 1)


class TestPVTAdapter:

    def test_pyramid_shapes(self, adapter):
        image = torch.randn(2, 1, 64, 64)
        x_t = torch.randn(2, 4, 64, 64)
        with torch.no_grad():
            pyramid = adapter(image, x_t, torch.tensor([3, 9]))
        assert isinstance(pyramid, PyramidFeatures)
        assert pyramid.shapes == [(32, 16, 16), (64, 8, 8), (160, 4, 4), (256, 2, 2)]
        assert pyramid.reduction_ratios == [8, 4, 2, 1]

    @pytest.mark.parametrize('scale', [1.0, 1e3])
    def test_stage_outputs_are_finite(self, adapter, scale):
        torch.manual_seed(1)
        with torch.no_grad():
            pyramid = adapter(scale * torch.randn(2, 1, 64, 64), scale * torch.randn(2, 4, 64, 64),
                              torch.tensor([1, 1000]))
        for stage in pyramid.stages:
            assert bool(torch.isfinite(stage).all())

    def test_mask_injection_starts_as_noop(self, adapter):
        image = torch.randn(2, 1, 64, 64)
        with torch.no_grad():
            reference = adapter(image)
            for x_t in (torch.zeros(2, 4, 64, 64), torch.randn(2, 4, 64, 64)):
                pyramid = adapter(image, x_t)
                for got, expected in zip(pyramid.stages, reference.stages):
                    torch.testing.assert_close(got, expected)

    def test_timestep_changes_features(self, adapter):
        image = torch.randn(1, 1, 64, 64)
        with torch.no_grad():
            early, late = adapter(image, t=1), adapter(image, t=90)
        assert not torch.allclose(early[0], late[0])

    def test_batch_permutation(self, adapter):
        image = torch.randn(3, 1, 64, 64)
        x_t = torch.randn(3, 4, 64, 64)
        t = torch.tensor([1, 5, 9])
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            pyramid = adapter(image, x_t, t)
            permuted = adapter(image[perm], x_t[perm], t[perm])
        for got, expected in zip(permuted.stages, pyramid.stages):
            torch.testing.assert_close(got, expected[perm], atol=1e-5, rtol=1e-5)

    def test_rejects_wrong_channels(self, adapter):
        with pytest.raises(ValueError):
            adapter(torch.randn(1, 3, 64, 64))
        with pytest.raises(ValueError):
            adapter(torch.randn(1, 1, 64, 64), torch.randn(1, 2, 64, 64))

    def test_rejects_negative_timestep(self, adapter):
        with pytest.raises(ValueError):
            adapter(torch.randn(1, 1, 64, 64), t=-1)

    def test_rejects_invalid_config(self):
        with pytest.raises(ValueError):
            PVTAdapter(AdapterConfig(num_heads=[3, 2, 5, 8]))


class TestFeatureFusion:

    def test_additive_identity_init(self):
        fusion = FeatureFusion(8, 8, FUSION_MODES[ADDITIVE])
        z, c = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4)
        torch.testing.assert_close(fusion(z, c), z + c)
        torch.testing.assert_close(fusion(z, torch.zeros_like(c)), z)

    def test_concat_projects_back(self):
        fusion = FeatureFusion(8, 8, FUSION_MODES[CONCAT])
        z, c = torch.randn(2, 8, 16, 16), torch.randn(2, 8, 16, 16)
        assert fusion.combine(z, c).shape == (2, 16, 16, 16)
        out = fusion(z, c)
        assert out.shape == (2, 8, 16, 16)
        torch.testing.assert_close(fusion(z, torch.zeros_like(c)), z)

    def test_none_ignores_conditioning(self):
        fusion = FeatureFusion(8, 16, FUSION_MODES[NONE])
        z = torch.randn(1, 8, 4, 4)
        assert fusion(z, torch.randn(1, 16, 4, 4)) is z
        assert not list(fusion.parameters())

    @pytest.mark.parametrize('mode', [FUSION_MODES[ADDITIVE], FUSION_MODES[CONCAT]])
    def test_output_keeps_encoder_shape(self, mode):
        fusion = FeatureFusion(8, 16, mode)
        assert fusion(torch.randn(2, 8, 4, 4), torch.randn(2, 16, 4, 4)).shape == (2, 8, 4, 4)

    def test_spatial_mismatch(self):
        fusion = FeatureFusion(8, 8, FUSION_MODES[ADDITIVE])
        with pytest.raises(ValueError):
            fusion(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            FeatureFusion(8, 8, 'product')
