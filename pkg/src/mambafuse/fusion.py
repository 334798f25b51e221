"""Multi-scale fusion: the dual-attention fusion block and the dense core.

The fusion block extracts multi-scale spatial semantics through three
parallel branches (two dilated bottlenecks, d=1 and d=2, plus a plain 3x3
branch), merges them with a 1x1 reduction, then refines the result with
channel attention followed by spatial attention.

The dense core runs coarse-to-fine over the three pyramid stages. Stage i
fuses the adapted conv feature, the enhanced token map, and the bilinearly
upsampled outputs of all previous stages, so its input width is
``fusion_width * (2 + i)`` when everything is enabled.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


class ChannelAttention(Module):
    """Squeeze both avg- and max-pooled descriptors through a shared MLP."""

    def __init__(self, channels: int, ratio: int, rng, dtype):
        hidden = max(channels // ratio, 1)
        self.fc1 = Conv2d(channels, hidden, 1, rng, dtype, bias=False)
        self.fc2 = Conv2d(hidden, channels, 1, rng, dtype, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(axis=(2, 3), keepdims=True)
        mx = x.max(axis=(2, 3), keepdims=True)
        gate = self.fc2(self.fc1(avg).relu()) + self.fc2(self.fc1(mx).relu())
        return gate.sigmoid()


class SpatialAttention(Module):
    """Gate each pixel from its channel-wise average and maximum."""

    def __init__(self, kernel: int, rng, dtype):
        self.conv = Conv2d(2, 1, kernel, rng, dtype, padding=(kernel - 1) // 2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(axis=1, keepdims=True)
        mx = x.max(axis=1, keepdims=True)
        return self.conv(ops.concat([avg, mx], axis=1)).sigmoid()


class _Bottleneck(Module):
    """1x1 reduce -> 3x3 (dilated) -> 1x1 expand, each followed by norm+relu."""

    def __init__(self, in_ch: int, out_ch: int, ratio: int, dilation: int, rng, dtype):
        mid = max(out_ch // ratio, 1)
        self.reduce = Conv2d(in_ch, mid, 1, rng, dtype, bias=False)
        self.bn1 = BatchNorm2d(mid, dtype)
        self.conv = Conv2d(mid, mid, 3, rng, dtype, padding=dilation,
                           dilation=dilation, bias=False)
        self.bn2 = BatchNorm2d(mid, dtype)
        self.expand = Conv2d(mid, out_ch, 1, rng, dtype, bias=False)
        self.bn3 = BatchNorm2d(out_ch, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1(self.reduce(x)).relu()
        x = self.bn2(self.conv(x)).relu()
        return self.bn3(self.expand(x)).relu()


class DualAttentionFusionBlock(Module):
    """Three-branch multi-dilation mixer refined by channel+spatial attention."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype,
                 bottleneck_ratio: int = 4, channel_ratio: int = 8, spatial_kernel: int = 7):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branch_d1 = _Bottleneck(in_channels, out_channels, bottleneck_ratio, 1, rng, dtype)
        self.branch_d2 = _Bottleneck(in_channels, out_channels, bottleneck_ratio, 2, rng, dtype)
        self.branch_3x3 = Conv2d(in_channels, out_channels, 3, rng, dtype,
                                 padding=1, bias=False)
        self.branch_bn = BatchNorm2d(out_channels, dtype)
        self.merge = Conv2d(3 * out_channels, out_channels, 1, rng, dtype, bias=False)
        self.merge_bn = BatchNorm2d(out_channels, dtype)
        self.channel_attn = ChannelAttention(out_channels, channel_ratio, rng, dtype)
        self.spatial_attn = SpatialAttention(spatial_kernel, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"fusion block expects {self.in_channels} channels, "
                             f"got input of shape {x.shape}")
        branches = ops.concat([
            self.branch_d1(x),
            self.branch_d2(x),
            self.branch_bn(self.branch_3x3(x)).relu(),
        ], axis=1)
        merged = self.merge_bn(self.merge(branches)).relu()
        merged = merged * self.channel_attn(merged)
        merged = merged * self.spatial_attn(merged)
        return merged


class DenseFusionCore(Module):
    """Coarse-to-fine fusion with dense reuse of earlier stage outputs."""

    def __init__(self, config, rng, dtype):
        self.mode = config.fusion_mode
        self.width = config.fusion_width
        self.num_inputs_per_stage = int(config.cnn_enabled) + int(config.mamba_enabled)
        stages = config.num_stages()
        self.stage_in_channels = []
        blocks = []
        for i in range(stages):
            history = i if self.mode == "dense" else 0
            in_ch = self.width * (self.num_inputs_per_stage + history)
            self.stage_in_channels.append(in_ch)
            blocks.append(DualAttentionFusionBlock(
                in_ch, self.width, rng, dtype,
                config.bottleneck_ratio, config.channel_attn_ratio,
                config.spatial_attn_kernel))
        self.blocks = blocks

    def forward(self, stage_inputs) -> list:
        """stage_inputs: per stage (coarse first) list of [N,F,Hi,Wi] maps.

        Returns the per-stage fused outputs, coarse first.
        """
        outputs = []
        for i, inputs in enumerate(stage_inputs):
            parts = list(inputs)
            if self.mode == "dense":
                target = parts[0].shape[2:]
                for prev in outputs:
                    parts.append(ops.interpolate(prev, target, mode="bilinear"))
            x = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]
            if x.shape[1] != self.stage_in_channels[i]:
                raise ShapeError(
                    f"fusion stage {i} expected {self.stage_in_channels[i]} input "
                    f"channels, got {x.shape[1]}")
            outputs.append(self.blocks[i](x))
        return outputs


def collect_final_vector(stage_outputs) -> Tensor:
    """Global average pool each stage output and concatenate: [N, stages*F]."""
    pooled = [ops.global_avg_pool(x) for x in stage_outputs]
    return ops.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
