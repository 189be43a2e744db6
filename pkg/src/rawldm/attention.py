"""Global and region-based cross-attention.

Region attention splits an ``H x W`` token grid into non-overlapping
``rh x rw`` windows and runs ordinary cross-attention inside each window.
The Q/K/V projections are a single parameter set shared by every window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import GroupNorm, Linear, Module, parameter
from .tensor import Tensor


@dataclass(frozen=True)
class RegionSpec:
    region_height: int = 4
    region_width: int = 4

    def num_regions(self, height: int, width: int) -> int:
        self.check(height, width)
        return (height // self.region_height) * (width // self.region_width)

    def check(self, height: int, width: int) -> None:
        if height % self.region_height or width % self.region_width:
            raise ShapeError(f"{height}x{width} token grid is not divisible into "
                             f"{self.region_height}x{self.region_width} regions")

    def clipped(self, height: int, width: int) -> "RegionSpec":
        """Same spec, shrunk to the grid when the grid is smaller than one region."""
        return RegionSpec(min(self.region_height, height), min(self.region_width, width))


class AttentionWeights(Module):
    """Projection matrices stored ``(d_in, d_k)``, so ``Q = z @ W_Q``."""

    def __init__(self, d_query: int, d_context: int, d_k: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.d_k = d_k
        self.W_Q = parameter(rng.normal(0, 1 / math.sqrt(d_query), (d_query, d_k)))
        self.W_K = parameter(rng.normal(0, 1 / math.sqrt(d_context), (d_context, d_k)))
        self.W_V = parameter(rng.normal(0, 1 / math.sqrt(d_context), (d_context, d_k)))


def _check_dims(z: Tensor, c: Tensor, w: AttentionWeights) -> None:
    if z.shape[-1] != w.W_Q.shape[0] or c.shape[-1] != w.W_K.shape[0]:
        raise ShapeError(f"attention: query dim {z.shape[-1]} / context dim {c.shape[-1]} do not match "
                         f"projections {w.W_Q.shape} / {w.W_K.shape}")


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k))`` over the key axis."""
    d_k = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.softmax(T.matmul(q, kt) * (1.0 / math.sqrt(d_k)), axis=-1)


def cross_attention(z: Tensor, c: Tensor, w: AttentionWeights, heads: int = 1,
                    return_weights: bool = False):
    """``A V`` with ``Q`` from ``z`` (..., N, d) and ``K, V`` from ``c`` (..., M, d_c)."""
    _check_dims(z, c, w)
    q, k, v = T.matmul(z, w.W_Q), T.matmul(c, w.W_K), T.matmul(c, w.W_V)
    if heads == 1:
        a = attention_weights(q, k)
        out = T.matmul(a, v)
        return (out, a) if return_weights else out
    if w.d_k % heads:
        raise ShapeError(f"d_k={w.d_k} is not divisible by {heads} heads")
    dh = w.d_k // heads
    lead = q.shape[:-2]

    def split(x):
        x = T.reshape(x, lead + (x.shape[-2], heads, dh))
        n = len(lead)
        return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    a = attention_weights(split(q), split(k))
    o = T.matmul(a, split(v))
    n = len(lead)
    o = T.transpose(o, tuple(range(n)) + (n + 1, n, n + 2))
    out = T.reshape(o, lead + (q.shape[-2], w.d_k))
    return (out, a) if return_weights else out


def partition_regions(z: Tensor, spec: RegionSpec) -> Tensor:
    """(B, H, W, d) or (H, W, d) -> (B, K, N', d) / (K, N', d), regions in raster order."""
    unbatched = z.ndim == 3
    if unbatched:
        z = T.reshape(z, (1,) + z.shape)
    b, h, w, d = z.shape
    spec.check(h, w)
    rh, rw = spec.region_height, spec.region_width
    x = T.reshape(z, (b, h // rh, rh, w // rw, rw, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, (h // rh) * (w // rw), rh * rw, d))
    return T.reshape(x, x.shape[1:]) if unbatched else x


def scatter_regions(regions: Tensor, spec: RegionSpec, height: int, width: int) -> Tensor:
    """Inverse of :func:`partition_regions`."""
    unbatched = regions.ndim == 3
    if unbatched:
        regions = T.reshape(regions, (1,) + regions.shape)
    b, k, n, d = regions.shape
    rh, rw = spec.region_height, spec.region_width
    spec.check(height, width)
    if k != (height // rh) * (width // rw) or n != rh * rw:
        raise ShapeError(f"cannot scatter {k} regions of {n} tokens onto {height}x{width}")
    x = T.reshape(regions, (b, height // rh, width // rw, rh, rw, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, height, width, d))
    return T.reshape(x, x.shape[1:]) if unbatched else x


def region_cross_attention(z: Tensor, c: Tensor, spec: RegionSpec, w: AttentionWeights,
                           heads: int = 1) -> Tensor:
    """Per-region cross-attention of ``z`` over ``c``; both (B, H, W, d) or (H, W, d)."""
    if z.shape[:-1] != c.shape[:-1]:
        raise ShapeError(f"latent grid {z.shape[:-1]} and condition grid {c.shape[:-1]} differ")
    h, w_ = z.shape[-3], z.shape[-2]
    out = cross_attention(partition_regions(z, spec), partition_regions(c, spec), w, heads=heads)
    return scatter_regions(out, spec, h, w_)


def to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) feature map -> (B, H, W, C) token grid."""
    return T.transpose(x, (0, 2, 3, 1))


def from_tokens(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


class RegionAttentionBlock(Module):
    """Normalise, region-attend, project back and add to the input.

    With ``context`` omitted at call time the block attends over its own
    (normalised) input, i.e. region self-attention.
    """

    def __init__(self, channels: int, context_channels: Optional[int] = None, d_k: Optional[int] = None,
                 spec: RegionSpec = RegionSpec(), heads: int = 1, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        context_channels = context_channels or channels
        d_k = d_k or channels
        self.spec = spec
        self.heads = heads
        self.norm = GroupNorm(channels)
        self.context_norm = GroupNorm(context_channels)
        self.weights = AttentionWeights(channels, context_channels, d_k, rng)
        self.proj_out = Linear(d_k, channels, rng=rng, zero_init=True)

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        h, w = x.shape[-2:]
        spec = self.spec.clipped(h, w)
        z = to_tokens(self.norm(x))
        c = z if context is None else to_tokens(self.context_norm(context))
        attended = region_cross_attention(z, c, spec, self.weights, heads=self.heads)
        return x + from_tokens(self.proj_out(attended))
