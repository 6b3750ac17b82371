"""Two-level skip-connection gate: channel recalibration, then spatial weighting."""

from __future__ import annotations

import numpy as np

from transnorm.errors import ConfigError, DimensionError
from transnorm.layers import Linear, Module
from transnorm.tensor import Tensor, global_avg_pool, relu, reshape, sigmoid
from transnorm.tensor import ops


class TwoLevelGate(Module):
    """Squeeze-excitation style MLP C -> C/r -> C producing channel weights."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 4):
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"gate channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.squeeze = Linear(rng, channels, channels // reduction)
        self.excite = Linear(rng, channels // reduction, channels)


def channel_attention(f: Tensor, gate: TwoLevelGate) -> Tensor:
    """Per-sample channel weights in (0, 1), shaped (B, C, 1, 1)."""
    b, c = f.shape[:2]
    if c != gate.channels:
        raise DimensionError(f"gate built for {gate.channels} channels, feature has {c}")
    w = sigmoid(gate.excite(relu(gate.squeeze(global_avg_pool(f)))))
    return reshape(w, (b, c, 1, 1))


def apply_gate(
    f: Tensor,
    spatial_map: Tensor | None,
    gate: TwoLevelGate | None,
    use_channel: bool = True,
    use_spatial: bool = True,
) -> Tensor:
    """``spatial_map * (channel_attention(f) * f)``; either level can be disabled.

    ``spatial_map`` is (B, 1, H, W) at the resolution of ``f``.
    """
    out = f
    if use_channel:
        out = ops.mul(channel_attention(f, gate), out)
    if use_spatial:
        if spatial_map is None:
            raise DimensionError("spatial gating requested without a spatial map")
        if spatial_map.ndim != 4 or spatial_map.shape[1] != 1 or spatial_map.shape[2:] != f.shape[2:]:
            raise DimensionError(
                f"spatial map {spatial_map.shape} does not match feature {f.shape} spatially"
            )
        out = ops.mul(spatial_map, out)
    return out
