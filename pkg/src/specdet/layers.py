"""Parameter containers on top of :mod:`specdet.tensor_core`."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Parameters plus non-trainable buffers (running statistics)."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_state(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_state(f"{prefix}{name}.{i}.")

    def submodules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.submodules()

    def train(self, mode: bool = True) -> None:
        for m in self.submodules():
            m.training = mode

    @contextlib.contextmanager
    def inference(self):
        """Running statistics instead of batch statistics, no graph recording."""
        prev = [(m, getattr(m, "training", True)) for m in self.submodules()]
        self.train(False)
        try:
            with tc.no_grad():
                yield self
        finally:
            for m, mode in prev:
                m.training = mode


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, bias: bool = True):
        self.weight = uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        self.bias = zeros_param((out_ch,)) if bias else None
        self.stride = stride
        self.padding = k // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch statistics in training, running averages otherwise."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param((channels,))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            y, mu, var = tc.standardize(x, (0, 2, 3), self.eps)
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mu).astype(np.float32)
            self.running_var.data = ((1 - m) * self.running_var.data + m * var).astype(np.float32)
            return tc.channel_affine(y, self.gamma, self.beta)
        inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
        scale = Tensor(self.gamma.data * inv, dtype=x.data.dtype)
        shift = Tensor(self.beta.data - self.running_mean.data * self.gamma.data * inv, dtype=x.data.dtype)
        return tc.channel_affine(x, scale, shift)


class ConvNormAct(Module):
    """3x3 conv (no bias), batch norm, SiLU."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int = 1):
        self.conv = Conv2d(rng, in_ch, out_ch, stride=stride, bias=False)
        self.norm = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.silu(self.norm(self.conv(x)))


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True):
        self.weight = uniform_init(rng, (out_features, in_features), in_features)
        self.bias = zeros_param((out_features,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class PixelMLP(Module):
    """Three 1x1 convolutions with SiLU between them (a per-pixel MLP)."""

    def __init__(self, rng, width: int, depth: int = 3):
        self.layers = [Conv2d(rng, width, width, k=1) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tc.silu(x)
        return x
