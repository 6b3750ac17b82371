"""Bottleneck vision transformer and the spatial map derived from its attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from transnorm.config import ModelConfig, TransformerConfig
from transnorm.errors import ContractError, DimensionError
from transnorm.layers import LayerNorm, Linear, Module, normal_param
from transnorm.tensor import (
    Tensor,
    bilinear_upsample,
    gelu,
    matmul,
    mean,
    permute,
    reduce_max,
    reshape,
    softmax,
)
from transnorm.tensor import ops


@dataclass
class AttentionRecord:
    """Per-layer attention probabilities (B x heads x N x N) and the derived map."""

    layers: list[Tensor] = field(default_factory=list)
    spatial_map: Tensor | None = None
    grid: tuple[int, int] = (0, 0)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, C*P*P); patches row-major, channel-major inside."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"patchify: {h}x{w} map not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, c, gh, patch, gw, patch))
    t = permute(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (b, gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, patch: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, n, d = tokens.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw or d != channels * patch * patch:
        raise DimensionError(
            f"unpatchify: tokens {tokens.shape} do not tile a {channels}x{height}x{width} map "
            f"with patch {patch}"
        )
    t = reshape(tokens, (b, gh, gw, channels, patch, patch))
    t = permute(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (b, channels, height, width))


def embed(patches: Tensor, projection: Tensor, position: Tensor) -> Tensor:
    """Linear patch embedding plus a learned position embedding."""
    if patches.shape[-1] != projection.shape[0] or position.shape != (patches.shape[1], projection.shape[1]):
        raise DimensionError(
            f"embed: patches {patches.shape}, projection {projection.shape}, "
            f"position {position.shape} disagree"
        )
    return ops.add(matmul(patches, projection), position)


class TransformerBlock(Module):
    """Pre-norm block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise DimensionError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.query = Linear(rng, dim, dim)
        # a key bias only adds q.b to every score of a query row, which softmax cancels
        self.key = Linear(rng, dim, dim, bias=False)
        self.value = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, 4 * dim)
        self.fc2 = Linear(rng, 4 * dim, dim)

    def attention(self, z: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = z.shape
        h, dh = self.heads, d // self.heads

        def split(t: Tensor) -> Tensor:
            return permute(reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.query(z)), split(self.key(z)), split(self.value(z))
        scores = ops.mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        return self.out(ctx), attn

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        msa, attn = self.attention(self.norm1(z))
        z = ops.add(msa, z)
        z = ops.add(self.fc2(gelu(self.fc1(self.norm2(z)))), z)
        return z, attn


def derive_spatial_map(attn: Tensor, patch: int, grid: tuple[int, int]) -> Tensor:
    """Received-attention saliency of each token as a [0, 1] map.

    Averages the heads, then the query axis, reshapes the per-token values to
    the token grid, upsamples bilinearly by ``patch`` and divides by the
    map maximum. Output is (B, 1, grid_h * patch, grid_w * patch).
    """
    if attn.ndim != 4 or attn.shape[-1] != attn.shape[-2]:
        raise DimensionError(f"attention must be B x heads x N x N, got {attn.shape}")
    b, _, n, _ = attn.shape
    gh, gw = grid
    if n != gh * gw:
        raise DimensionError(f"attention has {n} tokens but grid {gh}x{gw} has {gh * gw}")
    saliency = mean(mean(attn, axis=1), axis=1)
    m = bilinear_upsample(reshape(saliency, (b, 1, gh, gw)), patch)
    return ops.div(m, reduce_max(m, axis=(2, 3), keepdims=True))


def resize_spatial_map(ws: Tensor, factor: int) -> Tensor:
    """Bilinear resize of a spatial map followed by re-scaling to max 1."""
    if factor == 1:
        return ws
    m = bilinear_upsample(ws, factor)
    return ops.div(m, reduce_max(m, axis=(2, 3), keepdims=True))


class BottleneckTransformer(Module):
    def __init__(self, rng: np.random.Generator, tconfig: TransformerConfig, channels: int, side: int):
        p = tconfig.patch
        self.patch = p
        self.channels = channels
        self.side = side
        self.grid = (side // p, side // p)
        n_tokens = self.grid[0] * self.grid[1]
        token_len = p * p * channels
        self.projection = normal_param(rng, token_len, tconfig.dim)
        self.position = normal_param(rng, n_tokens, tconfig.dim)
        self.blocks = [TransformerBlock(rng, tconfig.dim, tconfig.heads) for _ in range(tconfig.layers)]
        self.norm = LayerNorm(tconfig.dim)
        self.head = Linear(rng, tconfig.dim, token_len)

    def __call__(self, x: Tensor) -> tuple[Tensor, AttentionRecord]:
        return run_transformer(x, self)


def run_transformer(x: Tensor, model: BottleneckTransformer) -> tuple[Tensor, AttentionRecord]:
    """Bottleneck map -> tokens -> K blocks -> map of the same shape as ``x``."""
    b, c, h, w = x.shape
    if (c, h, w) != (model.channels, model.side, model.side):
        raise DimensionError(
            f"transformer expects bottleneck {model.channels}x{model.side}x{model.side}, got {x.shape}"
        )
    z = embed(patchify(x, model.patch), model.projection, model.position)
    record = AttentionRecord(grid=model.grid)
    for block in model.blocks:
        z, attn = block(z)
        record.layers.append(attn)
    if record.layers:
        record.spatial_map = derive_spatial_map(record.layers[-1], model.patch, model.grid)
    out = unpatchify(model.head(model.norm(z)), model.patch, c, h, w)
    return out, record


def spatial_map_of(record: AttentionRecord) -> Tensor:
    if record.spatial_map is None:
        raise ContractError("no transformer layers ran, so no spatial map can be derived")
    return record.spatial_map


def build_transformer(rng: np.random.Generator, config: ModelConfig) -> BottleneckTransformer:
    return BottleneckTransformer(
        rng, config.effective_transformer, config.encoder_widths[-1], config.bottleneck_size
    )
