"""Residual convolutional branch with stage taps.

A 7x7/stride-2 stem plus 3x3/stride-2 max pool brings the input to 1/4
resolution, then four stages of basic residual blocks follow; stages 2-4
halve resolution and their outputs are tapped for fusion. Each tap gets a
1x1 adapter to the fusion width and, when enabled, a dual-attention
enhancement block.
"""

from __future__ import annotations

from . import ops
from .errors import ConfigurationError, ShapeError
from .fusion import DualAttentionFusionBlock
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity or 1x1-projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, dtype, stride=stride,
                            padding=1, bias=False)
        self.bn1 = BatchNorm2d(out_ch, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, dtype, padding=1, bias=False)
        self.bn2 = BatchNorm2d(out_ch, dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, dtype, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(out_ch, dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        residual = self.bn2(self.conv2(self.bn1(self.conv1(x)).relu()))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return (residual + shortcut).relu()


class Stage(Module):
    def __init__(self, in_ch: int, out_ch: int, blocks: int, stride: int, rng, dtype):
        self.in_channels = in_ch
        layers = [BasicBlock(in_ch, out_ch, stride, rng, dtype)]
        layers += [BasicBlock(out_ch, out_ch, 1, rng, dtype) for _ in range(blocks - 1)]
        self.layers = layers

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"stage expects {self.in_channels} input channels, got {x.shape[1]}")
        for layer in self.layers:
            x = layer(x)
        return x


class Stem(Module):
    """7x7/2 convolution, norm, relu, 3x3/2 max pool: input -> 1/4 scale."""

    def __init__(self, out_ch: int, rng, dtype):
        self.conv = Conv2d(3, out_ch, 7, rng, dtype, stride=2, padding=3, bias=False)
        self.bn = BatchNorm2d(out_ch, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ConfigurationError(
                f"stem needs spatial size divisible by 4, got {x.shape[2]}x{x.shape[3]}")
        x = self.bn(self.conv(x)).relu()
        return ops.max_pool2d(x, 3, stride=2, padding=1)


class CnnBranch(Module):
    """Stem + residual stages; taps the last three stage outputs."""

    def __init__(self, config, rng, dtype):
        widths, blocks = config.cnn_widths, config.cnn_blocks
        self.stem = Stem(widths[0], rng, dtype)
        stages = []
        in_ch = widths[0]
        for i, (w, b) in enumerate(zip(widths, blocks)):
            stages.append(Stage(in_ch, w, b, 1 if i == 0 else 2, rng, dtype))
            in_ch = w
        self.stages = stages
        self.tap_indices = list(range(len(stages) - 3, len(stages)))

        fw = config.fusion_width
        self.adapters = [Conv2d(widths[i], fw, 1, rng, dtype) for i in self.tap_indices]
        if config.e1_enabled:
            self.enhancers = [DualAttentionFusionBlock(
                fw, fw, rng, dtype, config.bottleneck_ratio,
                config.channel_attn_ratio, config.spatial_attn_kernel)
                for _ in self.tap_indices]
        else:
            self.enhancers = []

    def taps(self, image: Tensor) -> list:
        """Raw tapped stage outputs, finest first."""
        x = self.stem(image)
        tapped = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.tap_indices:
                tapped.append(x)
        return tapped

    def forward(self, image: Tensor) -> list:
        """Adapted (and enhanced) tap maps at the fusion width, finest first."""
        out = []
        for i, tap in enumerate(self.taps(image)):
            adapted = self.adapters[i](tap)
            if self.enhancers:
                adapted = self.enhancers[i](adapted)
            out.append(adapted)
        return out
