"""Content-preserving VAE with encoder-to-decoder residual convolutions.

Before decoder block ``b`` the decoder adds ``Conv_b(E_b)``, where ``E_b`` is
the encoder embedding after block ``b`` at the same resolution. With every
``Conv_b`` zeroed the model is exactly a plain VAE.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import Downsample, ResBlock, Upsample
from .errors import ShapeError
from .isp import ImagePlane
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class VaeConfig:
    in_channels: int = 3
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2, 4)
    latent_channels: int = 4
    kl_weight: float = 1e-4
    use_skips: bool = True
    seed: int = 0

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)

    @property
    def num_blocks(self) -> int:
        return len(self.channel_multipliers)

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.num_blocks

    @property
    def block_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        return cls(**d)


@dataclass
class VaeOutput:
    mu: Tensor
    logvar: Tensor
    skip_features: List[Tensor] = field(default_factory=list)


def planes_to_batch(planes: Sequence[ImagePlane]) -> Tensor:
    """Stack (H, W, C) planes into an (N, C, H, W) tensor."""
    return Tensor(np.stack([p.data.transpose(2, 0, 1) for p in planes]).astype(np.float32))


def batch_to_arrays(x: Tensor) -> np.ndarray:
    return x.data.transpose(0, 2, 3, 1)


class Encoder(Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        chs = cfg.block_channels
        self.conv_in = Conv2d(cfg.in_channels, chs[0], 3, rng=rng)
        self.blocks = []
        self.downs = []
        prev = chs[0]
        for ch in chs:
            self.blocks.append(ResBlock(prev, ch, rng=rng))
            self.downs.append(Downsample(ch, rng=rng))
            prev = ch
        self.norm_out = GroupNorm(prev)
        self.conv_out = Conv2d(prev, 2 * cfg.latent_channels, 3, rng=rng)

    def forward(self, x: Tensor):
        h = self.conv_in(x * 2.0 - 1.0)
        feats = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h)
            feats.append(h)
            h = down(h)
        moments = self.conv_out(T.silu(self.norm_out(h)))
        c = moments.shape[1] // 2
        return moments[:, :c], moments[:, c:], feats


class Decoder(Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        chs = cfg.block_channels
        self.conv_in = Conv2d(cfg.latent_channels, chs[-1], 3, rng=rng)
        self.ups = []
        self.blocks = []
        self.skip_convs = [] if cfg.use_skips else None
        prev = chs[-1]
        # index b runs over encoder blocks; construction order is b = 0..B-1, use is reversed
        for ch in chs:
            self.ups.append(None)
            self.blocks.append(None)
        for b in reversed(range(len(chs))):
            self.ups[b] = Upsample(prev, chs[b], rng=rng)
            self.blocks[b] = ResBlock(chs[b], chs[b], rng=rng)
            prev = chs[b]
        if cfg.use_skips:
            self.skip_convs = [Conv2d(ch, ch, 3, rng=rng, zero_init=True) for ch in chs]
        self.norm_out = GroupNorm(chs[0])
        self.conv_out = Conv2d(chs[0], cfg.in_channels, 3, rng=rng)
        self.conv_out.bias.data[:] = 0.5

    def forward(self, z: Tensor, skips: Optional[Sequence[Tensor]] = None) -> Tensor:
        h = self.conv_in(z)
        use = skips is not None and self.skip_convs is not None
        if use and len(skips) != len(self.blocks):
            raise ShapeError(f"expected {len(self.blocks)} skip features, got {len(skips)}")
        for b in reversed(range(len(self.blocks))):
            h = self.ups[b](h)
            if use:
                r = self.skip_convs[b](skips[b])
                if r.shape != h.shape:
                    raise ShapeError(f"skip feature {b}: residual shape {r.shape} != decoder shape {h.shape}")
                h = h + r
            h = self.blocks[b](h)
        out = self.conv_out(T.silu(self.norm_out(h)))
        return T.clamp(out, 0.0, 1.0)


class ResidualVAE(Module):
    def __init__(self, cfg: Optional[VaeConfig] = None):
        self.cfg = cfg or VaeConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)

    def _as_batch(self, img) -> Tensor:
        if isinstance(img, ImagePlane):
            return planes_to_batch([img])
        if isinstance(img, (list, tuple)):
            return planes_to_batch(img)
        return img

    def encode(self, img) -> VaeOutput:
        x = self._as_batch(img)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        f = self.cfg.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"image extents {x.shape[2]}x{x.shape[3]} are not divisible by {f}")
        mu, logvar, feats = self.encoder(x)
        return VaeOutput(mu, T.clamp(logvar, *LOGVAR_RANGE), feats)

    def decode(self, z: Tensor, skip_features: Optional[Sequence[Tensor]] = None) -> Tensor:
        """Decode to sRGB in [0, 1]; ``skip_features=None`` gives the plain decoder."""
        return self.decoder(z, skip_features)

    def forward(self, img):
        enc = self.encode(img)
        return self.decode(enc.mu, enc.skip_features)


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    noise = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + T.exp(logvar * 0.5) * noise


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1))."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    return T.mean((mu * mu + T.exp(logvar) - 1.0 - logvar) * 0.5)


def stage1_loss(noisy: Tensor, clean: Tensor, model: ResidualVAE, rng: np.random.Generator,
                use_skips: Optional[bool] = None, return_terms: bool = False):
    """Reconstruction L2 against the clean sRGB target plus ``kl_weight`` times KL."""
    if noisy.shape != clean.shape:
        raise ShapeError(f"noisy {noisy.shape} and clean {clean.shape} differ")
    use_skips = model.cfg.use_skips if use_skips is None else use_skips
    enc = model.encode(noisy)
    z = reparameterize(enc.mu, enc.logvar, rng)
    recon = model.decode(z, enc.skip_features if use_skips else None)
    rec = T.mse(recon, clean)
    kl = kl_divergence(enc.mu, enc.logvar)
    total = rec + kl * model.cfg.kl_weight if model.cfg.kl_weight else rec
    if return_terms:
        return total, {"reconstruction": rec.item(), "kl": kl.item()}
    return total
