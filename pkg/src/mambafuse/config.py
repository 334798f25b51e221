"""Model and training configuration records, including ablation toggles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigurationError


@dataclass
class ModelConfig:
    num_classes: int = 8
    image_size: int = 64
    precision: str = "single"            # single | double

    # convolutional branch
    cnn_enabled: bool = True
    cnn_widths: tuple = (32, 64, 128, 256)
    cnn_blocks: tuple = (2, 2, 2, 2)

    # state-space branch
    mamba_enabled: bool = True
    patch_size: int = 16
    embed_dim: int = 64
    mamba_depth: int = 6
    state_size: int = 8
    expand: int = 2
    conv_kernel: int = 4

    # fusion core
    fusion_width: int = 32
    e1_enabled: bool = True              # enhancement after the conv adapters
    e2_enabled: bool = True              # enhancement after the token adapters
    fusion_mode: str = "dense"           # dense | concat
    bottleneck_ratio: int = 4
    channel_attn_ratio: int = 8
    spatial_attn_kernel: int = 7

    # classifier head
    head: str = "moe"                    # moe | mlp
    num_experts: int = 4
    top_k: int = 2
    num_shared_experts: int = 1
    aux_loss_scale: float = 0.01
    expert_hidden_ratio: int = 4

    scan_impl: str = "sequential"        # sequential | associative

    def __post_init__(self):
        self.cnn_widths = tuple(self.cnn_widths)
        self.cnn_blocks = tuple(self.cnn_blocks)
        self.validate()

    def validate(self):
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"precision must be single|double, got {self.precision!r}")
        if self.image_size % 4 != 0:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by 4 (stem)")
        if self.mamba_enabled and self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch size {self.patch_size}")
        if not (self.cnn_enabled or self.mamba_enabled):
            raise ConfigurationError("at least one branch must be enabled")
        if len(self.cnn_widths) != len(self.cnn_blocks):
            raise ConfigurationError("cnn_widths and cnn_blocks lengths differ")
        if len(self.cnn_widths) < 3:
            raise ConfigurationError("the conv branch needs at least 3 stages to tap")
        if self.fusion_mode not in ("dense", "concat"):
            raise ConfigurationError(f"fusion_mode must be dense|concat, got {self.fusion_mode!r}")
        if self.head not in ("moe", "mlp"):
            raise ConfigurationError(f"head must be moe|mlp, got {self.head!r}")
        if self.head == "moe" and not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(
                f"top_k must satisfy 1 <= k <= M, got k={self.top_k} M={self.num_experts}")
        if self.aux_loss_scale < 0:
            raise ConfigurationError("aux_loss_scale must be >= 0")
        if self.mamba_depth < 3:
            raise ConfigurationError("mamba_depth must be >= 3 to provide three taps")
        if self.scan_impl not in ("sequential", "associative"):
            raise ConfigurationError(f"unknown scan_impl {self.scan_impl!r}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")

    # three taps, finest first, at 1/8, 1/16, 1/32 of the input
    def stage_resolutions(self):
        return [self.image_size // 8, self.image_size // 16, self.image_size // 32]

    def num_stages(self) -> int:
        return 3

    def mamba_tap_depths(self):
        d = self.mamba_depth
        return [d // 3, (2 * d) // 3, d]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        d["cnn_blocks"] = list(self.cnn_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_max: float = 5e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    label_smoothing: float = 0.1
    seed: int = 0
    augment: bool = True
    target_train_accuracy: float | None = None   # early stop once reached

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


ABLATION_KEYS = ("cnn", "mamba", "e1", "e2", "head", "dense")


def apply_ablations(config: ModelConfig, ablations: dict) -> ModelConfig:
    """Apply CLI-style toggles {cnn,mamba,e1,e2,head,dense} to a config."""
    d = config.to_dict()
    for key, value in ablations.items():
        if key == "cnn":
            d["cnn_enabled"] = _parse_onoff(key, value)
        elif key == "mamba":
            d["mamba_enabled"] = _parse_onoff(key, value)
        elif key == "e1":
            d["e1_enabled"] = _parse_onoff(key, value)
        elif key == "e2":
            d["e2_enabled"] = _parse_onoff(key, value)
        elif key == "head":
            if value not in ("moe", "mlp"):
                raise ConfigurationError(f"head must be moe or mlp, got {value!r}")
            d["head"] = value
        elif key == "dense":
            if value not in ("dense", "concat"):
                raise ConfigurationError(f"dense must be dense or concat, got {value!r}")
            d["fusion_mode"] = value
        else:
            raise ConfigurationError(
                f"unknown ablation key {key!r}, expected one of {ABLATION_KEYS}")
    return ModelConfig.from_dict(d)


def _parse_onoff(key: str, value: str) -> bool:
    if value in ("on", "true", "1"):
        return True
    if value in ("off", "false", "0"):
        return False
    raise ConfigurationError(f"ablation {key} expects on/off, got {value!r}")
