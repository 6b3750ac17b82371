"""Model configuration: every architectural choice in one validated place."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from transnorm.errors import ConfigError

ENCODER_STAGES = 4
DOWNSAMPLE = 2**ENCODER_STAGES

VARIANTS = ("baseline", "transformer", "channel", "spatial", "full")
SCALES = ("base", "large")
LARGE_TRANSFORMER = {"layers": 8, "dim": 128}


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch: int = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of a TransNorm network.

    ``variant`` selects the attention ablation:

    ``baseline``     CNN U-Net, no transformer, plain skip concatenation
    ``transformer``  transformer at the bottleneck, plain skip concatenation
    ``channel``      transformer + channel gate only on skips
    ``spatial``      transformer + transformer-derived spatial gate only
    ``full``         transformer + channel gate followed by spatial gate

    ``scale="large"`` replaces the transformer depth and width with
    ``LARGE_TRANSFORMER``.
    """

    input_channels: int = 1
    input_size: int = 64
    num_classes: int = 2
    base_width: int = 16
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    reduction: int = 4
    skip_count: int = 3
    scale: str = "base"
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.transformer, dict):
            object.__setattr__(self, "transformer", TransformerConfig(**self.transformer))
        self.validate()

    @property
    def uses_transformer(self) -> bool:
        return self.variant != "baseline"

    @property
    def channel_gate(self) -> bool:
        return self.variant in ("channel", "full")

    @property
    def spatial_gate(self) -> bool:
        return self.variant in ("spatial", "full")

    @property
    def effective_transformer(self) -> TransformerConfig:
        if self.scale == "large":
            return replace(self.transformer, **LARGE_TRANSFORMER)
        return self.transformer

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // DOWNSAMPLE

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(ENCODER_STAGES)]

    @property
    def decoder_widths(self) -> list[int]:
        """Output width of each decoder stage, deepest first, mirroring the encoder."""
        w = self.encoder_widths
        return [w[2], w[1], w[0], w[0]]

    def validate(self) -> None:
        t = self.effective_transformer
        checks = [
            (self.input_channels in (1, 3), f"input_channels must be 1 or 3, got {self.input_channels}"),
            (self.input_size > 0 and self.input_size % DOWNSAMPLE == 0,
             f"input_size must be a positive multiple of {DOWNSAMPLE}, got {self.input_size}"),
            (self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}"),
            (self.base_width >= 1, f"base_width must be >= 1, got {self.base_width}"),
            (self.skip_count in (0, 1, 2, 3), f"skip_count must be in 0..3, got {self.skip_count}"),
            (self.scale in SCALES, f"scale must be one of {SCALES}, got {self.scale!r}"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}"),
            (self.reduction >= 1, f"reduction must be >= 1, got {self.reduction}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.uses_transformer:
            if t.patch < 1 or self.bottleneck_size % t.patch:
                raise ConfigError(
                    f"patch size {t.patch} must divide the bottleneck side {self.bottleneck_size}"
                )
            if t.heads < 1 or t.dim % t.heads:
                raise ConfigError(f"embedding dim {t.dim} not divisible by {t.heads} heads")
            if t.layers < 0:
                raise ConfigError(f"transformer layers must be >= 0, got {t.layers}")
            if self.spatial_gate and self.skip_count and t.layers == 0:
                raise ConfigError("spatial gating needs at least one transformer layer to derive W_s")
        if self.channel_gate:
            for c in self.gate_channels():
                if c % self.reduction:
                    raise ConfigError(f"gate channels {c} not divisible by reduction {self.reduction}")

    def gate_channels(self) -> list[int]:
        """Channel count of each gated skip input (skip + upsampled), deepest first."""
        return [2 * w for w in self.decoder_widths[: self.skip_count]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        if "transformer" in data:
            tknown = {f.name for f in fields(TransformerConfig)}
            tunknown = set(data["transformer"]) - tknown
            if tunknown:
                raise ConfigError(f"unknown transformer config keys: {sorted(tunknown)}")
            data["transformer"] = TransformerConfig(**data["transformer"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
