"""Small module system: parameter containers and the layers the networks use."""
from __future__ import annotations

import zlib
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Per-module generator, so adding a submodule never shifts another's init."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)
            p.reset_state()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, seed: int, name: str, kernel: int = 3):
        rng = init_rng(seed, name)
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)), f"{name}.weight", np.float32)
        self.bias = Parameter(np.zeros(out_ch), f"{name}.bias", np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class Pointwise(Module):
    """1x1 projection over the channel axis.

    Accepts ``[B, C, H, W]`` maps and ``[C, N]`` / ``[B, C, N]`` point sets.
    """

    def __init__(self, in_ch: int, out_ch: int, seed: int, name: str, gain: float = 2.0):
        rng = init_rng(seed, name)
        std = np.sqrt(gain / in_ch)
        self.weight = Parameter(rng.normal(0.0, std, (out_ch, in_ch)), f"{name}.weight", np.float32)
        self.bias = Parameter(np.zeros(out_ch), f"{name}.bias", np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            B, C, H, W = x.shape
            y = ops.linear(ops.reshape(x, (B, C, H * W)), self.weight, self.bias)
            return ops.reshape(y, (B, -1, H, W))
        return ops.linear(x, self.weight, self.bias)


class MLP(Module):
    """Pointwise layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], seed: int, name: str):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        n = len(dims) - 1
        self.layers = [
            Pointwise(dims[i], dims[i + 1], seed, f"{name}.{i}", gain=2.0 if i < n - 1 else 1.0) for i in range(n)
        ]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x
