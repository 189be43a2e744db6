"""Small module system on top of :mod:`rawldm.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import IncompatibleCheckpointError, ShapeError
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Container that discovers parameters and submodules from its attributes.

    Every Tensor attribute is a parameter; frozen ones keep ``requires_grad=False``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise IncompatibleCheckpointError(
                    f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise IncompatibleCheckpointError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel_size, kernel_size)
        fan_in = in_ch * kernel_size * kernel_size
        w = np.zeros(shape, np.float32) if zero_init else kaiming_uniform(rng, shape, fan_in) / math.sqrt(2.0)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_ch, np.float32))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``(in, out)``."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((in_dim, out_dim), np.float32) if zero_init else \
            kaiming_uniform(rng, (in_dim, out_dim), in_dim) / math.sqrt(2.0)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_dim, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        groups = math.gcd(groups, channels)
        if channels % groups:
            raise ShapeError(f"cannot split {channels} channels into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = parameter(np.ones(channels, np.float32))
        self.bias = parameter(np.zeros(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)
