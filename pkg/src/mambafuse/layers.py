"""Parameterized building blocks over the tensor engine.

``Module`` discovers parameters (trainable ``Tensor`` attributes) and
buffers (plain ``np.ndarray`` attributes, e.g. batch-norm running
statistics) by walking attributes, so checkpointing and the optimizer
see one flat name -> array view of any model.

Weight initialization follows fan-in scaling: conv and linear weights are
zero-mean normal with std sqrt(2/fan_in), biases start at zero, and
normalization scales/shifts start at one/zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def normal_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, dtype, bias: bool = True):
        self.weight = normal_init(rng, (in_features, out_features), in_features, dtype)
        self.bias = zeros_param((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng, dtype,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True):
        fan_in = in_channels * kernel * kernel
        self.weight = normal_init(rng, (out_channels, in_channels, kernel, kernel),
                                  fan_in, dtype)
        self.bias = zeros_param((out_channels,), dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        from .ops import conv2d
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, dilation=self.dilation)


class BatchNorm2d(Module):
    """Per-channel normalization with running statistics (momentum 0.1)."""

    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean += self.momentum * (mu.data.reshape(c) - self.running_mean)
            self.running_var += self.momentum * (var.data.reshape(c) - self.running_var)
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1))
            centered = x - mu
            var = Tensor(self.running_var.reshape(1, c, 1, 1))
        inv = (var + self.eps) ** -0.5
        return self.gamma.reshape(1, c, 1, 1) * (centered * inv) + self.beta.reshape(1, c, 1, 1)


class LayerNorm(Module):
    """Normalization over the last axis (token features)."""

    def __init__(self, dim: int, dtype, eps: float = 1e-5):
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return self.gamma * (centered * (var + self.eps) ** -0.5) + self.beta
