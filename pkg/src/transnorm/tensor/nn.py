"""Convolution, pooling, normalization and resampling operators (NCHW layout)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from transnorm.errors import ContractError, DimensionError, UninitializedStatisticsError
from transnorm.tensor.core import Tensor, record


def _windows(x: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # (B, C, out_h, out_w, k, k) strided view, no copy
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _im2col(x: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, H, W) -> (C*k*k, B*out_h*out_w) patch matrix."""
    win = _windows(x, k, stride, out_h, out_w)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(-1, x.shape[0] * out_h * out_w)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Scatter-add a (C*k*k, B*oh*ow) matrix onto a (B, C, H, W) canvas."""
    b, oh, ow, h, w = shape[0], shape[1], shape[2], shape[3][0], shape[3][1]
    cols = cols.reshape(c, k, k, b, oh, ow)
    out = np.zeros((c, b, h, w))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _channels_first(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C, B*H*W)."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)


def _batch_first(m: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """(C, B*H*W) -> contiguous (B, C, H, W)."""
    return np.ascontiguousarray(m.reshape(m.shape[0], b, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    b, c, h, w = x.shape
    o, _, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d: only square kernels are supported, got {weight.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    out_h, out_w = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(o, -1)
    cols = _im2col(xp, k, stride, out_h, out_w)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _batch_first(out, b, out_h, out_w)

    def back(g):
        gx = gw = gb = None
        gmat = _channels_first(g)
        if x.requires_grad:
            gx = _col2im(wmat.T @ gmat, c, k, stride, (b, out_h, out_w, (hp, wp)))
            gx = np.ascontiguousarray(gx[:, :, padding : padding + h, padding : padding + w])
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k).

    The forward pass is the input-gradient of :func:`conv2d` with the same
    weight and stride, so output size is ``(H - 1) * stride + k``.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1:
        raise ContractError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    b, c, h, w = x.shape
    o, k = weight.shape[1], weight.shape[2]
    out_h, out_w = (h - 1) * stride + k, (w - 1) * stride + k
    wmat = weight.data.reshape(c, -1)
    xmat = _channels_first(x.data)
    out = _col2im(wmat.T @ xmat, o, k, stride, (b, h, w, (out_h, out_w)))
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        cols = _im2col(g, k, stride, h, w)
        gx = _batch_first(wmat @ cols, b, h, w) if x.requires_grad else None
        gw = (xmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose2d", inputs, out, back)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties go to the first row-major element."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"max_pool2d: spatial size {h}x{w} not divisible by window {window}")
    oh, ow = h // window, w // window
    blocks = x.data.reshape(b, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, oh, ow, window * window)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((b, c, oh, ow, window * window))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return record("max_pool2d", (x,), out, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),)

    return record("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), back)


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``shift``."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / shift {shift.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = _normalize_backward(g * gd, x_hat, inv_std, -1) if x.requires_grad else None
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gain, shift), x_hat * gd + shift.data, back)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.num_batches = 0
        self.momentum = momentum
        self.eps = eps

    @property
    def initialized(self) -> bool:
        return self.num_batches > 0


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with batch statistics and updates ``state``
    (running variance uses the unbiased estimate). Inference mode uses the
    stored running statistics.
    """
    b, c, h, w = x.shape
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    if training:
        n = b * h * w
        if n < 2:
            raise ContractError(f"batch_norm: training mode needs B*H*W >= 2, got input {x.shape}")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(c) * n / (n - 1)
        state.num_batches += 1
    else:
        if not state.initialized:
            raise UninitializedStatisticsError(
                "batch_norm: inference requested before any training-mode batch"
            )
        mu = state.running_mean.reshape(shape)
        var = state.running_var.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mu) * inv_std
    gd = gamma.data.reshape(shape)

    def back(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _normalize_backward(g * gd, x_hat, inv_std, axes)
            else:
                gx = g * gd * inv_std
        return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", (x, gamma, beta), x_hat * gd + beta.data.reshape(shape), back)


@lru_cache(maxsize=64)
def _interp_matrix(size: int, factor: int) -> np.ndarray:
    """Linear interpolation matrix (size*factor, size), half-pixel centres."""
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    lo = np.minimum(np.floor(src).astype(int), size - 1)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    m = np.zeros((out, size))
    np.add.at(m, (np.arange(out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(out), hi), frac)
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    if factor < 1:
        raise ContractError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects a 4-D input, got {x.shape}")
    if factor == 1:
        return record("bilinear_upsample", (x,), x.data.copy(), lambda g: (g,))
    ah = _interp_matrix(x.shape[2], factor)
    aw = _interp_matrix(x.shape[3], factor)
    out = ah @ x.data @ aw.T

    def back(g):
        return (ah.T @ g @ aw,)

    return record("bilinear_upsample", (x,), out, back)
