"""TransNorm: CNN encoder, bottleneck transformer, gated skips, cascaded decoder."""

from __future__ import annotations

import numpy as np

from transnorm.attention_gate import TwoLevelGate, apply_gate
from transnorm.config import ModelConfig
from transnorm.encoder import Encoder, encode
from transnorm.errors import DimensionError
from transnorm.layers import Conv2d, ConvTranspose2d, DoubleConv, Module
from transnorm.tensor import Tensor, concat
from transnorm.tensor import ops
from transnorm.transformer import AttentionRecord, build_transformer, resize_spatial_map


class DecoderStage(Module):
    """Transposed-conv upsampling, optional gated skip concat, two conv blocks."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, skip: bool, config: ModelConfig):
        self.up = ConvTranspose2d(rng, c_in, c_out, k=2, stride=2)
        self.skip = skip
        self.gate = TwoLevelGate(rng, 2 * c_out, config.reduction) if skip and config.channel_gate else None
        self.block = DoubleConv(rng, 2 * c_out if skip else c_out, c_out)


class TransNorm(Module):
    """The full segmentation network.

    Decoder stage ``i`` (deepest first) upsamples by two; the first
    ``skip_count`` stages concatenate the matching encoder level and pass the
    result through the configured gate. Remaining stages upsample without a
    skip until full resolution.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(rng, config)
        bottleneck = config.encoder_widths[-1]
        if config.uses_transformer:
            self.transformer = build_transformer(rng, config)
            self.fuse = Conv2d(rng, 2 * bottleneck, bottleneck, 1)
        else:
            self.transformer = None
            self.fuse = None
        c_in = [bottleneck] + config.decoder_widths[:-1]
        self.decoder = [
            DecoderStage(rng, a, b, i < config.skip_count, config)
            for i, (a, b) in enumerate(zip(c_in, config.decoder_widths))
        ]
        self.head = Conv2d(rng, config.decoder_widths[-1], config.num_classes, 1)
        self.gate_calls = 0
        self.neutral_gates = False

    @property
    def gated(self) -> bool:
        return self.config.channel_gate or self.config.spatial_gate

    def __call__(self, image: Tensor) -> tuple[Tensor, AttentionRecord]:
        return self.forward(image)

    def forward(self, image: Tensor) -> tuple[Tensor, AttentionRecord]:
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise DimensionError(f"model expects B x {expected}, got {image.shape}")
        pyramid = encode(image, self.encoder)
        x = pyramid.bottleneck
        record = AttentionRecord()
        if self.transformer is not None:
            z, record = self.transformer(x)
            x = self.fuse(concat([x, z], axis=1))

        skips = pyramid.skips[::-1]
        for i, stage in enumerate(self.decoder):
            x = stage.up(x)
            if stage.skip:
                x = concat([skips[i], x], axis=1)
                if self.gated:
                    x = self._gate(x, stage, record, 2 ** (i + 1))
            x = stage.block(x)
        return self.head(x), record

    def _gate(self, f: Tensor, stage: DecoderStage, record: AttentionRecord, factor: int) -> Tensor:
        self.gate_calls += 1
        if self.neutral_gates:
            b, c, h, w = f.shape
            f = ops.mul(Tensor(np.ones((b, c, 1, 1))), f)
            return ops.mul(Tensor(np.ones((b, 1, h, w))), f)
        ws = None
        if self.config.spatial_gate:
            ws = resize_spatial_map(record.spatial_map, factor)
        return apply_gate(f, ws, stage.gate, self.config.channel_gate, self.config.spatial_gate)

    def predict(self, image: Tensor) -> np.ndarray:
        """Class-id mask (B, H, W) from an inference-mode forward pass."""
        was_training = self.training
        self.eval()
        try:
            logits, _ = self.forward(image)
        finally:
            self.train(was_training)
        return logits.data.argmax(axis=1)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())
