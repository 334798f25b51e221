"""Full classifier: dual-branch encoder, dense fusion core, expert head."""

from __future__ import annotations

import numpy as np

from .cnn import CnnBranch
from .config import ModelConfig
from .errors import ConfigurationError
from .fusion import DenseFusionCore, collect_final_vector
from .layers import Module
from .mamba import MambaBranch
from .moe import MlpHead, MoEHead
from .tensor import Tensor, dtype_of


class MambaFuseClassifier(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        dtype = dtype_of(config.precision)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF00D]))
        self.cnn = CnnBranch(config, rng, dtype) if config.cnn_enabled else None
        self.mamba = MambaBranch(config, rng, dtype) if config.mamba_enabled else None
        self.fusion = DenseFusionCore(config, rng, dtype)
        feat_dim = config.num_stages() * config.fusion_width
        if config.head == "moe":
            self.head = MoEHead(feat_dim, config.num_classes, config.num_experts,
                                config.top_k, config.num_shared_experts,
                                config.aux_loss_scale, config.expert_hidden_ratio,
                                rng, dtype)
        else:
            self.head = MlpHead(feat_dim, config.num_classes,
                                config.expert_hidden_ratio, rng, dtype)

    def set_shuffle_rng(self, rng: np.random.Generator | None):
        """Generator driving the per-forward shuffle path during training."""
        if self.mamba is not None:
            self.mamba.shuffle_rng = rng

    def _check_input(self, image: Tensor):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"expected [N,3,H,W] input, got {image.shape}")
        if image.shape[2] != self.config.image_size or image.shape[3] != self.config.image_size:
            raise ConfigurationError(
                f"model built for {self.config.image_size}px input, got "
                f"{image.shape[2]}x{image.shape[3]}")

    def forward(self, image: Tensor, taps: dict | None = None,
                forced_selection: np.ndarray | None = None):
        """Run the classifier.

        Returns (logits, aux_loss Tensor or None, RoutingReport or None).
        When ``taps`` is a dict it is filled with named intermediate nodes
        for the analysis tools.
        """
        self._check_input(image)
        cnn_maps = self.cnn(image) if self.cnn is not None else None
        mamba_maps = self.mamba(image) if self.mamba is not None else None

        # branch outputs arrive finest-first; fusion runs coarse-to-fine
        stage_inputs = []
        for i in range(self.config.num_stages() - 1, -1, -1):
            inputs = []
            if cnn_maps is not None:
                inputs.append(cnn_maps[i])
            if mamba_maps is not None:
                inputs.append(mamba_maps[i])
            stage_inputs.append(inputs)
        fused = self.fusion(stage_inputs)
        final_vec = collect_final_vector(fused)

        if taps is not None:
            if cnn_maps is not None:
                for i, node in enumerate(cnn_maps):
                    taps[f"cnn_{i}"] = node
            if mamba_maps is not None:
                for i, node in enumerate(mamba_maps):
                    taps[f"mamba_{i}"] = node
            for i, node in enumerate(fused):
                taps[f"fused_{i}"] = node
            taps["final_vector"] = final_vec

        if isinstance(self.head, MoEHead):
            return self.head(final_vec, forced_selection=forced_selection)
        return self.head(final_vec)

    def logits(self, image: Tensor) -> Tensor:
        return self.forward(image)[0]


def build_model(config: ModelConfig, seed: int = 0) -> MambaFuseClassifier:
    return MambaFuseClassifier(config, seed=seed)
