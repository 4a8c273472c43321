"""Parameter containers and the layers the branches and query head are built from."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def layer_rng(seed: int, name: str) -> np.random.Generator:
    # per-layer stream so that enabling/disabling one branch leaves the others' init untouched
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, *, seed: int = 0,
                 name: str = "conv", dtype=np.float64):
        rng = layer_rng(seed, name)
        self.stride = stride
        self.padding = k // 2
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, *, seed: int = 0, name: str = "linear", dtype=np.float64):
        rng = layer_rng(seed, name)
        # stored (in, out) so the forward is a single x @ W
        self.weight = Tensor(kaiming_uniform(rng, (fan_in, fan_out), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class MLP(Module):
    def __init__(self, fan_in: int, hidden: list[int], fan_out: int, *, seed: int = 0,
                 name: str = "mlp", dtype=np.float64):
        dims = [fan_in, *hidden, fan_out]
        self.layers = [Linear(a, b, seed=seed, name=f"{name}.{i}", dtype=dtype)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    @property
    def in_features(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)
