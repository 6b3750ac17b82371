"""Parameter containers wrapping the functional tensor operators."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from transnorm.tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    conv2d,
    conv_transpose2d,
    layer_norm,
    matmul,
    relu,
)
from transnorm.tensor import ops

INIT_STD = 0.02


def normal_param(rng: np.random.Generator, *shape: int, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def const_param(value: float, *shape: int) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


class Module:
    """Walks attributes to find parameters, batch-norm states and submodules.

    Attribute insertion order defines parameter order, which makes
    initialization and checkpoint layout deterministic.
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_bn_states(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = normal_param(rng, n_in, n_out)
        self.bias = const_param(0.0, n_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out if self.bias is None else ops.add(out, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = const_param(1.0, dim)
        self.shift = const_param(0.0, dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, padding: int = 0, bias: bool = True):
        self.weight = normal_param(rng, c_out, c_in, k, k)
        self.bias = const_param(0.0, c_out) if bias else None
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 2, stride: int = 2):
        self.weight = normal_param(rng, c_in, c_out, k, k)
        self.bias = const_param(0.0, c_out)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = const_param(1.0, channels)
        self.beta = const_param(0.0, channels)
        self.state = BatchNormState(channels, momentum, eps)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ConvBNReLU(Module):
    """3x3 conv (no bias, batch norm follows) -> batch norm -> ReLU."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, 3, padding=1, bias=False)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        self.first = ConvBNReLU(rng, c_in, c_out)
        self.second = ConvBNReLU(rng, c_out, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))
