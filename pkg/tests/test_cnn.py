"""Residual branch: stem arithmetic, block composition, taps, adapters."""

import numpy as np
import pytest

from mambafuse import ops
from mambafuse.cnn import BasicBlock, CnnBranch, Stage, Stem
from mambafuse.config import ModelConfig
from mambafuse.errors import ConfigurationError
from mambafuse.layers import zeros_param
from mambafuse.tensor import Tensor

from conftest import check_gradients


def tiny_config(**overrides):
    base = dict(num_classes=4, image_size=32, precision="double",
                cnn_widths=(4, 4, 8, 8), cnn_blocks=(1, 1, 1, 1),
                patch_size=16, embed_dim=8, mamba_depth=3, state_size=3,
                fusion_width=4)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def prng():
    return np.random.default_rng(11)


class TestStem:
    @pytest.mark.parametrize("size,expected", [(224, 56), (64, 16), (32, 8)])
    def test_quarter_resolution(self, prng, size, expected):
        stem = Stem(4, prng, np.float64)
        out = stem(Tensor(prng.random((1, 3, size, size))))
        assert out.shape == (1, 4, expected, expected)

    def test_indivisible_rejected(self, prng):
        stem = Stem(4, prng, np.float64)
        with pytest.raises(ConfigurationError):
            stem(Tensor(np.zeros((1, 3, 30, 30))))

    def test_zero_image_zero_preactivation(self, prng):
        stem = Stem(4, prng, np.float64)
        conv_out = stem.conv(Tensor(np.zeros((1, 3, 32, 32))))
        assert np.allclose(conv_out.data, 0.0)


class TestBasicBlock:
    def test_zero_residual_identity_shortcut(self, prng):
        block = BasicBlock(4, 4, 1, prng, np.float64)
        block.conv2.weight = zeros_param(block.conv2.weight.shape, np.float64)
        x = np.abs(prng.normal(size=(2, 4, 6, 6)))  # nonnegative: relu transparent
        out = block(Tensor(x))
        assert np.array_equal(out.data, x)

    def test_zero_residual_projection_shortcut(self, prng):
        block = BasicBlock(4, 8, 2, prng, np.float64)
        block.conv2.weight = zeros_param(block.conv2.weight.shape, np.float64)
        block.eval()
        x = prng.normal(size=(2, 4, 6, 6))
        out = block(Tensor(x))
        expected = block.proj_bn(block.proj(Tensor(x))).relu()
        assert np.array_equal(out.data, expected.data)

    def test_stride_halves_resolution(self, prng):
        block = BasicBlock(4, 8, 2, prng, np.float64)
        out = block(Tensor(prng.random((1, 4, 56, 56))))
        assert out.shape == (1, 8, 28, 28)

    def test_one_block_stage_matches_hand_pipeline(self, prng):
        stage = Stage(4, 4, 1, 1, prng, np.float64)
        stage.eval()
        block = stage.layers[0]
        x = prng.normal(size=(1, 4, 4, 4))
        got = stage(Tensor(x)).data
        want = (block.bn2(block.conv2(block.bn1(block.conv1(Tensor(x))).relu()))
                + Tensor(x)).relu().data
        assert np.array_equal(got, want)

    def test_channel_mismatch_rejected(self, prng):
        stage = Stage(4, 8, 1, 1, prng, np.float64)
        with pytest.raises(ConfigurationError):
            stage(Tensor(np.zeros((1, 6, 8, 8))))


class TestCnnBranch:
    def test_taps_form_pyramid(self, prng):
        cfg = tiny_config(image_size=64)
        branch = CnnBranch(cfg, prng, np.float64)
        taps = branch.taps(Tensor(prng.random((2, 3, 64, 64))))
        shapes = [t.shape for t in taps]
        assert shapes == [(2, 4, 8, 8), (2, 8, 4, 4), (2, 8, 2, 2)]
        for a, b in zip(shapes, shapes[1:]):
            assert a[2] == 2 * b[2] and a[3] == 2 * b[3]

    def test_adapted_maps_at_fusion_width(self, prng):
        cfg = tiny_config(image_size=64, fusion_width=4)
        branch = CnnBranch(cfg, prng, np.float64)
        branch.eval()
        maps = branch(Tensor(prng.random((1, 3, 64, 64))))
        assert [m.shape for m in maps] == [(1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]

    def test_zeroed_residuals_reduce_to_shortcut_chain(self, prng):
        # zero both convs of every residual path: each block is then
        # relu(shortcut(x)), so the deepest tap equals the stem output
        # pushed through the projection shortcuts alone
        cfg = tiny_config(image_size=32)
        branch = CnnBranch(cfg, prng, np.float64)
        branch.eval()
        for stage in branch.stages:
            for block in stage.layers:
                block.conv1.weight = zeros_param(block.conv1.weight.shape, np.float64)
                block.conv2.weight = zeros_param(block.conv2.weight.shape, np.float64)
        x = Tensor(prng.random((1, 3, 32, 32)))
        deepest = branch.taps(x)[-1].data

        expected = branch.stem(x)
        for stage in branch.stages:
            for block in stage.layers:
                if block.proj is not None:
                    expected = block.proj_bn(block.proj(expected))
                expected = expected.relu()
        assert np.array_equal(deepest, expected.data)

    def test_e1_disabled_keeps_adapter_only(self, prng):
        cfg = tiny_config(e1_enabled=False)
        branch = CnnBranch(cfg, prng, np.float64)
        assert branch.enhancers == []
        maps = branch(Tensor(prng.random((1, 3, 32, 32))))
        assert maps[0].shape == (1, 4, 4, 4)

    def test_e1_enhance_gradient_flows_to_input(self, prng):
        cfg = tiny_config(image_size=32)
        branch = CnnBranch(cfg, prng, np.float64)
        branch.eval()
        tap = Tensor(prng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        out = branch.enhancers[0](branch.adapters[0](tap))
        r = prng.normal(size=out.shape)

        def build(t):
            return (branch.enhancers[0](branch.adapters[0](t)) * Tensor(r)).sum()

        check_gradients(build, tap.data, tol=1e-4)
