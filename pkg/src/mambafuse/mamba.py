"""Token branch: patch embedding and stacked selective state-space blocks.

Each block wraps a selective mixer: the scanned sequence drives its own
step size, input and readout projections (softplus keeps the step
positive), the per-channel diagonal transition is stored in log space so
it stays strictly negative, and discretization uses the exact zero-order
hold with a guarded limit at A -> 0.

Every block scans three permutations of the token sequence - forward,
reverse, and a shuffle - through the same mixer weights, then blends the
three outputs with a per-token softmax gate. The shuffle permutation is
redrawn each training forward from the run generator and pinned to the
identity in eval mode. Tapped block outputs are projected, reshaped to a
grid, resized to the paired pyramid resolution, and optionally enhanced.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError
from .fusion import DualAttentionFusionBlock
from .layers import LayerNorm, Linear, Module, normal_init, zeros_param
from .tensor import Tensor


class PatchEmbed(Module):
    """Non-overlapping patch embedding with a class token and learned positions."""

    def __init__(self, config, rng, dtype):
        p = config.patch_size
        self.patch_size = p
        self.dim = config.embed_dim
        grid = config.image_size // p
        tokens = grid * grid + 1
        self.proj = Linear(3 * p * p, self.dim, rng, dtype)
        self.cls_token = zeros_param((1, 1, self.dim), dtype)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(1, tokens, self.dim)).astype(dtype),
            requires_grad=True)

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigurationError(
                f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = (image.reshape(n, c, gh, p, gw, p)
                   .transpose(0, 2, 4, 1, 3, 5)
                   .reshape(n, gh * gw, c * p * p))
        tokens = self.proj(patches)
        cls = ops.concat([self.cls_token] * n, axis=0) if n > 1 else self.cls_token
        tokens = ops.concat([cls, tokens], axis=1)
        return tokens + self.pos_embed


def discretize(delta: Tensor, a_diag: Tensor, b: Tensor):
    """Zero-order-hold discretization of a diagonal system.

    delta: [N,L,D] positive steps; a_diag: [D,S] negative transitions;
    b: [N,L,S] input projections. Returns (a_bar [N,L,D,S], b_bar [N,L,D,S])
    with a_bar = exp(delta*a) and b_bar = ((exp(delta*a) - 1)/a) * b, taking
    the limit delta*b where |a| < 1e-8.
    """
    n, length, d = delta.shape
    delta4 = delta.reshape(n, length, d, 1)
    a_bar = (delta4 * a_diag).exp()
    b4 = b.reshape(n, length, 1, b.shape[-1])
    tiny = np.abs(a_diag.data) < 1e-8
    safe_a = ops.where(tiny, Tensor(np.ones_like(a_diag.data)), a_diag)
    exact = (a_bar - 1.0) / safe_a * b4
    limit = delta4 * b4
    b_bar = ops.where(np.broadcast_to(tiny, a_bar.shape), limit, exact)
    return a_bar, b_bar


class SelectiveMixer(Module):
    """Gated selective-scan mixer shared by the three scan paths."""

    def __init__(self, dim: int, state_size: int, expand: int, conv_kernel: int,
                 scan_impl: str, rng, dtype):
        inner = expand * dim
        self.inner = inner
        self.state_size = state_size
        self.scan_impl = scan_impl
        self.in_proj = Linear(dim, 2 * inner, rng, dtype)
        self.conv_w = normal_init(rng, (inner, conv_kernel), conv_kernel, dtype)
        self.conv_b = zeros_param((inner,), dtype)
        # transition stored in log space: a = -exp(log_a) stays negative
        self.log_a = Tensor(
            np.broadcast_to(np.log(np.arange(1, state_size + 1, dtype=dtype)),
                            (inner, state_size)).copy(),
            requires_grad=True)
        self.b_proj = Linear(inner, state_size, rng, dtype, bias=False)
        self.c_proj = Linear(inner, state_size, rng, dtype, bias=False)
        self.delta_proj = Linear(inner, inner, rng, dtype)
        # bias placing the initial softplus step inside [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=inner))
        self.delta_proj.bias = Tensor(np.log(np.expm1(dt)).astype(dtype),
                                      requires_grad=True)
        self.gate_proj = Linear(inner, 3, rng, dtype)
        self.out_proj = Linear(inner, dim, rng, dtype)

    def a_diag(self) -> Tensor:
        return -self.log_a.exp()

    def _scan_one_path(self, u, delta, a, b, c, perm):
        if perm is None:
            return ops.selective_scan(u, delta, a, b, c, impl=self.scan_impl)
        y = ops.selective_scan(ops.permute_tokens(u, perm),
                               ops.permute_tokens(delta, perm), a,
                               ops.permute_tokens(b, perm),
                               ops.permute_tokens(c, perm), impl=self.scan_impl)
        return ops.permute_tokens(y, np.argsort(perm))

    def path_outputs(self, u: Tensor, shuffle_perm: np.ndarray | None):
        """Scan the forward, reverse, and shuffled orders with shared weights.

        The step, input, and readout projections are per-token maps, so
        they are computed once and permuted alongside the tokens.
        """
        length = u.shape[1]
        delta = self.delta_proj(u).softplus()
        b = self.b_proj(u)
        c = self.c_proj(u)
        a = self.a_diag()
        reverse = np.arange(length)[::-1].copy()
        if shuffle_perm is None:
            shuffle_perm = np.arange(length)
        return [self._scan_one_path(u, delta, a, b, c, None),
                self._scan_one_path(u, delta, a, b, c, reverse),
                self._scan_one_path(u, delta, a, b, c, shuffle_perm)]

    def forward(self, x: Tensor, shuffle_perm: np.ndarray | None = None) -> Tensor:
        n, length, _ = x.shape
        uz = self.in_proj(x)
        u, z = uz[:, :, :self.inner], uz[:, :, self.inner:]
        u = ops.silu(ops.dwconv1d(u, self.conv_w, self.conv_b))
        paths = self.path_outputs(u, shuffle_perm)
        gate = ops.softmax(self.gate_proj(u), axis=-1)
        y = paths[0] * gate[:, :, 0:1]
        y = y + paths[1] * gate[:, :, 1:2]
        y = y + paths[2] * gate[:, :, 2:3]
        return self.out_proj(y * ops.silu(z))


class MambaBlock(Module):
    """Pre-normalized mixer with a residual connection."""

    def __init__(self, dim: int, state_size: int, expand: int, conv_kernel: int,
                 scan_impl: str, rng, dtype):
        self.norm = LayerNorm(dim, dtype)
        self.mixer = SelectiveMixer(dim, state_size, expand, conv_kernel,
                                    scan_impl, rng, dtype)

    def forward(self, x: Tensor, shuffle_perm=None) -> Tensor:
        return x + self.mixer(self.norm(x), shuffle_perm)


class MambaBranch(Module):
    """Patchify, run the block stack, and emit three enhanced 2-d maps."""

    def __init__(self, config, rng, dtype):
        self.embed = PatchEmbed(config, rng, dtype)
        self.blocks = [MambaBlock(config.embed_dim, config.state_size, config.expand,
                                  config.conv_kernel, config.scan_impl, rng, dtype)
                       for _ in range(config.mamba_depth)]
        self.tap_depths = config.mamba_tap_depths()
        self.resolutions = config.stage_resolutions()
        fw = config.fusion_width
        self.adapters = [Linear(config.embed_dim, fw, rng, dtype) for _ in range(3)]
        if config.e2_enabled:
            self.enhancers = [DualAttentionFusionBlock(
                fw, fw, rng, dtype, config.bottleneck_ratio,
                config.channel_attn_ratio, config.spatial_attn_kernel)
                for _ in range(3)]
        else:
            self.enhancers = []
        self.shuffle_rng: np.random.Generator | None = None

    def token_taps(self, image: Tensor) -> list:
        tokens = self.embed(image)
        length = tokens.shape[1]
        taps = []
        for depth, block in enumerate(self.blocks, start=1):
            perm = None
            if self.training and self.shuffle_rng is not None:
                perm = self.shuffle_rng.permutation(length)
            tokens = block(tokens, perm)
            if depth in self.tap_depths:
                taps.append(tokens)
        return taps

    def to_map(self, tokens: Tensor, stage: int) -> Tensor:
        """Drop the class token, project, and reshape to the stage grid."""
        n, length, _ = tokens.shape
        grid = int(round((length - 1) ** 0.5))
        if grid * grid != length - 1:
            raise ShapeError(
                f"token grid is not square: {length - 1} patch tokens")
        patches = tokens[:, 1:, :]
        projected = self.adapters[stage](patches)
        fmap = (projected.reshape(n, grid, grid, projected.shape[-1])
                .transpose(0, 3, 1, 2))
        res = self.resolutions[stage]
        fmap = ops.interpolate(fmap, (res, res), mode="bilinear")
        if self.enhancers:
            fmap = self.enhancers[stage](fmap)
        return fmap

    def forward(self, image: Tensor) -> list:
        """Enhanced token maps aligned to the pyramid, finest first.

        The earliest tap pairs with the finest resolution, the deepest
        with the coarsest.
        """
        return [self.to_map(tokens, i) for i, tokens in enumerate(self.token_taps(image))]
