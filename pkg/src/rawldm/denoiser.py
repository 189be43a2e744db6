"""Toy noise-prediction U-Net with region cross-attention and a context processor.

The encoder runs one residual block per resolution level. Levels listed in
``attention_levels`` follow the block with region cross-attention whose keys
and values come from the context processor's feature map at that level. The
context processor is a copy of the U-Net encoder's convolutional layers,
made at construction time, and is applied to the conditioning latent.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import RegionAttentionBlock, RegionSpec
from .blocks import Downsample, ResBlock, Upsample
from .errors import ConfigError, RangeError, ShapeError
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import Tensor


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    depth: int = 3
    channel_multipliers: tuple = (1, 2, 2)
    attention_levels: tuple = (1, 2)
    time_embed_dim: int = 64
    region_specs: tuple = ((2, 2), (2, 2), (2, 2))
    heads: int = 1
    num_timesteps: int = 1000
    # multiplies VAE latents before diffusion so they have roughly unit variance
    latent_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(sorted(set(self.attention_levels)))
        self.region_specs = tuple(tuple(s) for s in self.region_specs)
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.channel_multipliers) != self.depth:
            raise ConfigError(f"need {self.depth} channel multipliers, got {len(self.channel_multipliers)}")
        if len(self.region_specs) != self.depth:
            raise ConfigError(f"need {self.depth} region specs, got {len(self.region_specs)}")
        bad = [lv for lv in self.attention_levels if not 0 <= lv < self.depth]
        if bad:
            raise ConfigError(f"attention levels {bad} are outside 0..{self.depth - 1}")
        if self.time_embed_dim % 2:
            raise ConfigError(f"time embedding dimension must be even, got {self.time_embed_dim}")

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def region_spec(self, level: int) -> RegionSpec:
        return RegionSpec(*self.region_specs[level])

    def check_latent(self, height: int, width: int) -> None:
        f = 2 ** (self.depth - 1)
        if height % f or width % f:
            raise ShapeError(f"latent extents {height}x{width} are not divisible by {f}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        d["region_specs"] = [list(s) for s in self.region_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def time_embedding(t, dim: int, num_timesteps: int = 1000) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]``.

    ``t`` may be a scalar (returns ``(dim,)``) or a 1-D array (``(N, dim)``).
    Frequencies are ``f_k = 10000^(-k / (dim/2))``.
    """
    if dim % 2:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    ts = np.asarray(t, dtype=np.float64)
    if np.any(ts < 0) or np.any(ts > num_timesteps):
        raise RangeError(f"timestep {t} outside [0, {num_timesteps}]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = ts[..., None] * freqs
    emb = np.empty(args.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(args)
    emb[..., 1::2] = np.cos(args)
    return emb


class _EncoderLayers(Module):
    """Convolutional trunk shared in shape by the U-Net encoder and the context processor."""

    def __init__(self, cfg: UNetConfig, temb_dim: Optional[int], rng: np.random.Generator):
        chs = cfg.level_channels
        self.conv_in = Conv2d(cfg.latent_channels, chs[0], 3, rng=rng)
        self.blocks = []
        self.downs = []
        prev = chs[0]
        for lv, ch in enumerate(chs):
            self.blocks.append(ResBlock(prev, ch, temb_dim, rng=rng))
            self.downs.append(Downsample(ch, rng=rng) if lv < cfg.depth - 1 else None)
            prev = ch


class ContextProcessor(Module):
    """Encoder-shaped network that turns the conditioning latent into per-level features."""

    def __init__(self, cfg: UNetConfig, layers: _EncoderLayers):
        self.cfg = cfg
        self.layers = copy.deepcopy(layers)
        # the condition is fixed across timesteps, so the time projections are not copied
        for block in self.layers.blocks:
            block.temb_proj = None

    def forward(self, z_y: Tensor) -> List[Tensor]:
        return context_features(z_y, self)


def context_features(z_y: Tensor, cp: ContextProcessor) -> List[Tensor]:
    """One feature map per attention level, matching the U-Net encoder at that level."""
    cfg = cp.cfg
    if z_y.ndim != 4 or z_y.shape[1] != cfg.latent_channels:
        raise ShapeError(f"expected (N, {cfg.latent_channels}, H, W) condition latent, got {z_y.shape}")
    cfg.check_latent(*z_y.shape[2:])
    h = cp.layers.conv_in(z_y)
    feats = []
    for lv, (block, down) in enumerate(zip(cp.layers.blocks, cp.layers.downs)):
        h = block(h)
        if lv in cfg.attention_levels:
            feats.append(h)
        if down is not None:
            h = down(h)
    return feats


class UNet(Module):
    def __init__(self, cfg: Optional[UNetConfig] = None):
        self.cfg = cfg = cfg or UNetConfig()
        rng = np.random.default_rng(cfg.seed)
        chs = cfg.level_channels
        temb = 2 * cfg.time_embed_dim
        self.time_fc1 = Linear(cfg.time_embed_dim, temb, rng=rng)
        self.time_fc2 = Linear(temb, temb, rng=rng)
        self.encoder = _EncoderLayers(cfg, temb, rng)
        self.enc_attn = [RegionAttentionBlock(ch, ch, spec=cfg.region_spec(lv), heads=cfg.heads, rng=rng)
                         if lv in cfg.attention_levels else None for lv, ch in enumerate(chs)]
        self.mid = ResBlock(chs[-1], chs[-1], temb, rng=rng)
        self.dec_blocks = [None] * cfg.depth
        self.dec_attn = [None] * cfg.depth
        self.ups = [None] * cfg.depth
        for lv in reversed(range(cfg.depth)):
            self.dec_blocks[lv] = ResBlock(2 * chs[lv], chs[lv], temb, rng=rng)
            if lv in cfg.attention_levels:
                self.dec_attn[lv] = RegionAttentionBlock(chs[lv], spec=cfg.region_spec(lv), heads=cfg.heads,
                                                         rng=rng)
            if lv > 0:
                self.ups[lv] = Upsample(chs[lv], chs[lv - 1], rng=rng)
        self.norm_out = GroupNorm(chs[0])
        self.conv_out = Conv2d(chs[0], cfg.latent_channels, 3, rng=rng, zero_init=True)
        self.context = ContextProcessor(cfg, self.encoder)

    def backbone_parameters(self) -> list:
        """Everything except the context processor and the attention blocks."""
        new = {id(p) for p in self.new_parameters()}
        return [p for p in self.parameters() if id(p) not in new]

    def new_parameters(self) -> list:
        params = list(self.context.parameters())
        for blk in self.enc_attn + self.dec_attn:
            if blk is not None:
                params.extend(blk.parameters())
        return params

    def _temb(self, t, n: int) -> Tensor:
        ts = np.broadcast_to(np.asarray(t), (n,))
        emb = Tensor(time_embedding(ts, self.cfg.time_embed_dim, self.cfg.num_timesteps).astype(np.float32))
        return self.time_fc2(T.silu(self.time_fc1(emb)))

    def encoder_features(self, x: Tensor) -> List[Tensor]:
        """Encoder features at the attention levels with no time input and no attention."""
        return context_features(x, _TrunkView(self.cfg, self.encoder))

    def condition(self, z_y: Tensor) -> List[Tensor]:
        return context_features(z_y, self.context)

    def null_condition(self, shape, seed: int = 0) -> List[Tensor]:
        """Context features of a standard-Gaussian latent, the unconditional stand-in."""
        rng = np.random.default_rng(seed)
        return self.condition(Tensor(rng.standard_normal(shape).astype(np.float32)))

    def predict_noise(self, z_t: Tensor, t, cond: Optional[Sequence[Tensor]] = None,
                      null_seed: int = 0) -> Tensor:
        cfg = self.cfg
        if z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ShapeError(f"expected (N, {cfg.latent_channels}, H, W) latent, got {z_t.shape}")
        cfg.check_latent(*z_t.shape[2:])
        if cond is None:
            cond = self.null_condition(z_t.shape, null_seed)
        if len(cond) != len(cfg.attention_levels):
            raise ShapeError(f"expected {len(cfg.attention_levels)} condition features, got {len(cond)}")
        cond_at = dict(zip(cfg.attention_levels, cond))
        temb = self._temb(t, z_t.shape[0])
        h = self.encoder.conv_in(z_t)
        skips = []
        for lv in range(cfg.depth):
            h = self.encoder.blocks[lv](h, temb)
            if lv in cond_at:
                c = cond_at[lv]
                if c.shape[0] != h.shape[0] and c.shape[0] == 1:
                    c = T.concat([c] * h.shape[0], axis=0)
                if c.shape[2:] != h.shape[2:] or c.shape[0] != h.shape[0]:
                    raise ShapeError(f"condition at level {lv} has shape {c.shape}, features are {h.shape}")
                h = self.enc_attn[lv](h, c)
            skips.append(h)
            if self.encoder.downs[lv] is not None:
                h = self.encoder.downs[lv](h)
        h = self.mid(h, temb)
        for lv in reversed(range(cfg.depth)):
            h = self.dec_blocks[lv](T.concat([h, skips[lv]], axis=1), temb)
            if self.dec_attn[lv] is not None:
                h = self.dec_attn[lv](h)
            if self.ups[lv] is not None:
                h = self.ups[lv](h)
        return self.conv_out(T.silu(self.norm_out(h)))

    def forward(self, z_t: Tensor, t, cond=None) -> Tensor:
        return self.predict_noise(z_t, t, cond)


class _TrunkView:
    """Adapter so the U-Net's own encoder can be run through :func:`context_features`."""

    def __init__(self, cfg: UNetConfig, layers: _EncoderLayers):
        self.cfg = cfg
        self.layers = layers
