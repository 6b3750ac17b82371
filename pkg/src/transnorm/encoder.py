"""CNN contracting path producing the skip features and the bottleneck."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from transnorm.config import DOWNSAMPLE, ModelConfig
from transnorm.errors import DimensionError
from transnorm.layers import DoubleConv, Module
from transnorm.tensor import Tensor, max_pool2d


@dataclass
class FeaturePyramid:
    """Encoder outputs at 1/2, 1/4, 1/8 (skip candidates) and the 1/16 bottleneck."""

    levels: list[Tensor]

    @property
    def skips(self) -> list[Tensor]:
        return self.levels[:-1]

    @property
    def bottleneck(self) -> Tensor:
        return self.levels[-1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.levels]


class Encoder(Module):
    """Four stages of two conv-bn-relu blocks followed by 2x2 max pooling."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        widths = config.encoder_widths
        c_in = [config.input_channels] + widths[:-1]
        self.stages = [DoubleConv(rng, a, b) for a, b in zip(c_in, widths)]
        self.input_channels = config.input_channels

    def __call__(self, image: Tensor) -> FeaturePyramid:
        return encode(image, self)


def encode(image: Tensor, encoder: Encoder) -> FeaturePyramid:
    if image.ndim != 4:
        raise DimensionError(f"encode expects B x C x H x W, got {image.shape}")
    _, c, h, w = image.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionError(f"input {h}x{w} is not divisible by {DOWNSAMPLE}")
    if c != encoder.input_channels:
        raise DimensionError(f"input has {c} channels, encoder expects {encoder.input_channels}")
    levels = []
    x = image
    for stage in encoder.stages:
        x = max_pool2d(stage(x), 2)
        levels.append(x)
    return FeaturePyramid(levels)
