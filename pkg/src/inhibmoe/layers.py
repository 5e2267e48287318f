"""Layers for the convolutional backbone, experts, router and gate networks."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor

FEATURE_DIM = 128
IMAGE_SHAPE = (1, 28, 28)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=ag.DEFAULT_DTYPE) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=ag.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in assignment order: a
    trainable :class:`Tensor`, a child ``Module``, or a list/dict of
    modules. Names are dotted paths, e.g. ``experts.2.fc1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=ag.DEFAULT_DTYPE):
        self.weight = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
        self.bias = zeros_param((out_features,), dtype)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"Linear({self.in_features}->{self.out_features}) got input {x.shape}")
        return ag.matmul(x, self.weight.T) + self.bias


class MLP(Module):
    """Two-layer perceptron: linear, ReLU, linear."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator,
                 dtype=ag.DEFAULT_DTYPE):
        self.fc1 = Linear(in_features, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out_features, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.relu(self.fc1(x)))


def mlp_forward(x: Tensor, mlp: MLP) -> Tensor:
    return mlp(x)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 dtype=ag.DEFAULT_DTYPE):
        k = kernel_size
        shape = (out_channels, in_channels, k, k)
        self.weight = glorot_uniform(rng, shape, in_channels * k * k, out_channels * k * k, dtype)
        self.bias = zeros_param((out_channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias)


class ConvBackbone(Module):
    """28x28 -> conv5(8) -> pool -> conv5(16) -> pool -> 256 -> 128 features.

    ``__call__`` returns the feature batch together with the flattened
    pooling outputs, which are the taps available to earlier-site gates.
    """

    conv1_channels = 8
    conv2_channels = 16
    kernel = 5

    def __init__(self, rng: np.random.Generator, feature_dim: int = FEATURE_DIM, dtype=ag.DEFAULT_DTYPE):
        self.conv1 = Conv2d(1, self.conv1_channels, self.kernel, rng, dtype)
        self.conv2 = Conv2d(self.conv1_channels, self.conv2_channels, self.kernel, rng, dtype)
        self.proj = Linear(self.flat_dim, feature_dim, rng, dtype)

    pool1_dim = conv1_channels * 12 * 12
    flat_dim = conv2_channels * 4 * 4

    def __call__(self, images: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
            raise DimensionError(f"backbone expects [B, 1, 28, 28] images, got {images.shape}")
        b = images.shape[0]
        h1 = ag.maxpool2d(ag.relu(self.conv1(images)))
        h2 = ag.maxpool2d(ag.relu(self.conv2(h1)))
        pool1 = h1.reshape(b, self.pool1_dim)
        pool2 = h2.reshape(b, self.flat_dim)
        features = ag.relu(self.proj(pool2))
        return features, {"pool1": pool1, "pool2": pool2}


def backbone_forward(images: Tensor, backbone: ConvBackbone) -> Tensor:
    return backbone(images)[0]
