"""Convolutional building blocks shared by the VAE and the denoising U-Net."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import Tensor


class ResBlock(Module):
    """GroupNorm-SiLU-conv twice with an additive shortcut.

    ``temb_dim`` adds a projected time embedding between the two convs.
    """

    def __init__(self, in_ch: int, out_ch: int, temb_dim: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.norm1 = GroupNorm(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng=rng)
        self.temb_proj = Linear(temb_dim, out_ch, rng=rng) if temb_dim else None
        self.norm2 = GroupNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng=rng) if in_ch != out_ch else None

    def forward(self, x: Tensor, temb: Optional[Tensor] = None) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        if temb is not None and self.temb_proj is not None:
            t = self.temb_proj(T.silu(temb))
            h = h + T.reshape(t, t.shape + (1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return skip + h


class Downsample(Module):
    """Halve both extents with a 2x2 stride-2 convolution."""

    def __init__(self, in_ch: int, out_ch: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        self.conv = Conv2d(in_ch, out_ch or in_ch, 2, stride=2, padding=0, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """Nearest-neighbour doubling followed by a 3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        self.conv = Conv2d(in_ch, out_ch or in_ch, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))
