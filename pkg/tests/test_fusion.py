"""Fusion block and dense core: widths, attention ranges, channel law."""

import numpy as np
import pytest

from mambafuse import ops
from mambafuse.config import ModelConfig
from mambafuse.errors import ShapeError
from mambafuse.fusion import (DenseFusionCore, DualAttentionFusionBlock,
                              collect_final_vector)
from mambafuse.layers import zeros_param
from mambafuse.tensor import Tensor


def tiny_config(**overrides):
    base = dict(num_classes=4, image_size=32, precision="double",
                cnn_widths=(4, 4, 8, 8), cnn_blocks=(1, 1, 1, 1),
                patch_size=16, embed_dim=8, mamba_depth=3, state_size=3,
                fusion_width=4)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def prng():
    return np.random.default_rng(23)


class TestFusionBlock:
    def test_spatial_shape_preserved(self, prng):
        block = DualAttentionFusionBlock(96, 32, prng, np.float64)
        out = block(Tensor(prng.random((2, 96, 16, 16))))
        assert out.shape == (2, 32, 16, 16)

    def test_attention_maps_strictly_inside_unit_interval(self, prng):
        block = DualAttentionFusionBlock(8, 8, prng, np.float64)
        x = Tensor(prng.normal(size=(2, 8, 6, 6)))
        ca = block.channel_attn(x).data
        sa = block.spatial_attn(x).data
        for attn in (ca, sa):
            assert np.all(attn > 0) and np.all(attn < 1)

    def test_zeroed_attention_scales_by_quarter(self, prng):
        # sigmoid(0) = 0.5 for both attentions -> 0.25 x pre-attention output
        block = DualAttentionFusionBlock(6, 8, prng, np.float64)
        block.eval()
        for conv in (block.channel_attn.fc1, block.channel_attn.fc2,
                     block.spatial_attn.conv):
            conv.weight = zeros_param(conv.weight.shape, np.float64)
        x = Tensor(prng.normal(size=(1, 6, 5, 5)))
        pre = block.merge_bn(block.merge(ops.concat([
            block.branch_d1(x), block.branch_d2(x),
            block.branch_bn(block.branch_3x3(x)).relu()], axis=1))).relu()
        out = block(x)
        assert np.allclose(out.data, 0.25 * pre.data, atol=1e-12)

    def test_wrong_width_rejected(self, prng):
        block = DualAttentionFusionBlock(8, 4, prng, np.float64)
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 6, 4, 4))))


class TestDenseCore:
    def test_channel_law_dense(self, prng):
        for fw in (16, 32):
            cfg = tiny_config(fusion_width=fw, image_size=32)
            core = DenseFusionCore(cfg, prng, np.float64)
            assert core.stage_in_channels == [2 * fw, 3 * fw, 4 * fw]

    def test_channel_law_concat_mode(self, prng):
        for fw in (16, 32):
            cfg = tiny_config(fusion_width=fw, fusion_mode="concat")
            core = DenseFusionCore(cfg, prng, np.float64)
            assert core.stage_in_channels == [2 * fw, 2 * fw, 2 * fw]

    def test_single_branch_widths(self, prng):
        cfg = tiny_config(mamba_enabled=False)
        core = DenseFusionCore(cfg, prng, np.float64)
        assert core.stage_in_channels == [4, 8, 12]

    def _stage_inputs(self, prng, fw, sizes=(2, 4, 8), n=2):
        return [[Tensor(prng.normal(size=(n, fw, s, s))),
                 Tensor(prng.normal(size=(n, fw, s, s)))] for s in sizes]

    def test_forward_coarse_to_fine_shapes(self, prng):
        cfg = tiny_config(fusion_width=4)
        core = DenseFusionCore(cfg, prng, np.float64)
        outs = core(self._stage_inputs(prng, 4))
        assert [o.shape for o in outs] == [(2, 4, 2, 2), (2, 4, 4, 4), (2, 4, 8, 8)]

    def test_history_length_mismatch_rejected(self, prng):
        cfg = tiny_config(fusion_width=4)
        core = DenseFusionCore(cfg, prng, np.float64)
        bad = self._stage_inputs(prng, 4)
        bad[1].append(Tensor(prng.normal(size=(2, 4, 4, 4))))  # extra input
        with pytest.raises(ShapeError):
            core(bad)

    def test_concat_ablation_equals_fresh_two_input_stage(self, prng):
        # dropping the dense links must reproduce a two-input-only fusion
        cfg_dense = tiny_config(fusion_width=4)
        core = DenseFusionCore(cfg_dense, prng, np.float64)
        core.eval()
        inputs = self._stage_inputs(prng, 4)

        cfg_concat = tiny_config(fusion_width=4, fusion_mode="concat")
        twin = DenseFusionCore(cfg_concat, np.random.default_rng(0), np.float64)
        twin.eval()
        twin.blocks[0] = core.blocks[0]  # identical weights, stage 0 is 2F wide in both
        dense_out = core(inputs)[0].data
        concat_out = twin(inputs)[0].data
        assert np.array_equal(dense_out, concat_out)

    def test_permuting_concat_order_changes_output(self, prng):
        cfg = tiny_config(fusion_width=4)
        core = DenseFusionCore(cfg, prng, np.float64)
        core.eval()
        inputs = self._stage_inputs(prng, 4)
        base = core(inputs)[2].data
        swapped = [list(reversed(stage)) for stage in inputs]
        other = core(swapped)[2].data
        assert np.abs(base - other).max() > 1e-8

    def test_history_upsample_is_power_of_two(self, prng):
        cfg = tiny_config(fusion_width=4)
        core = DenseFusionCore(cfg, prng, np.float64)
        sizes = [inp[0].shape[2] for inp in self._stage_inputs(prng, 4)]
        for i, size in enumerate(sizes):
            for j in range(i):
                ratio = size / sizes[j]
                assert ratio == 2 ** (i - j)


class TestFinalVector:
    def test_width_is_three_f(self, prng):
        maps = [Tensor(prng.normal(size=(2, 32, s, s))) for s in (2, 4, 8)]
        vec = collect_final_vector(maps)
        assert vec.shape == (2, 96)

    def test_constant_map_pools_to_constant(self):
        maps = [Tensor(np.full((1, 3, 4, 4), 2.5))]
        assert np.allclose(collect_final_vector(maps).data, 2.5)

    def test_matches_brute_force_mean(self, prng):
        maps = [Tensor(prng.normal(size=(3, 5, 6, 7)))]
        vec = collect_final_vector(maps).data
        brute = np.empty((3, 5))
        for n in range(3):
            for ch in range(5):
                acc = 0.0
                for i in range(6):
                    for j in range(7):
                        acc += maps[0].data[n, ch, i, j]
                brute[n, ch] = acc / 42.0
        assert np.abs(vec - brute).max() < 1e-6
