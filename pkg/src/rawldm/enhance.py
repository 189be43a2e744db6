"""Inference: raw frame to enhanced sRGB, and evaluation over paired data."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import diffusion as D
from . import isp
from . import tensor as T
from .checkpoint import Checkpoint
from .denoiser import UNet
from .errors import IncompatibleCheckpointError, NumericalError
from .isp import ImagePlane, RawFrame
from .metrics import psnr, ssim
from .rawio import load_raw, write_image
from .tensor import Tensor
from .trainer import load_unet, load_vae
from .vae import ResidualVAE


@dataclass
class Enhancer:
    vae: ResidualVAE
    unet: UNet
    schedule: D.NoiseSchedule

    @classmethod
    def from_checkpoints(cls, vae_source, unet_source) -> "Enhancer":
        vae, vae_ckpt = load_vae(vae_source)
        unet, unet_ckpt = load_unet(unet_source)
        expected = unet_ckpt.config.get("vae_hash")
        if expected is not None and expected != vae_ckpt.config_hash():
            raise IncompatibleCheckpointError(
                f"U-Net was trained against VAE {expected}, got VAE {vae_ckpt.config_hash()}")
        if unet.cfg.latent_channels != vae.cfg.latent_channels:
            raise IncompatibleCheckpointError("VAE and U-Net latent channel counts differ")
        train = unet_ckpt.config.get("train", {})
        schedule = D.make_linear_schedule(train.get("num_timesteps", unet.cfg.num_timesteps),
                                          train.get("beta_start", 1e-4), train.get("beta_end", 0.02))
        return cls(vae.freeze(), unet.freeze(), schedule)

    @property
    def multiple(self) -> int:
        """Image extents must be multiples of this for the full encoder/U-Net stack."""
        cfg = self.unet.cfg
        region = max(max(s) for s in cfg.region_specs)
        return self.vae.cfg.downsample_factor * 2 ** (cfg.depth - 1) * region

    def enhance_batch(self, noisy_lrgb: np.ndarray, guidance: D.GuidanceConfig = D.GuidanceConfig(),
                      steps: int = 50, seed: int = 0) -> np.ndarray:
        """(N, 3, H, W) brightened linear RGB -> (N, 3, H, W) sRGB in [0, 1]."""
        n, _, h, w = noisy_lrgb.shape
        m = self.multiple
        ph, pw = -h % m, -w % m
        x = np.pad(noisy_lrgb, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else noisy_lrgb
        scale = self.unet.cfg.latent_scale
        with T.no_grad():
            enc = self.vae.encode(Tensor(x.astype(np.float32)))
            cond = self.unet.condition(enc.mu * scale)
            z = D.ddim_sample(self.unet, self.schedule, cond, steps, guidance, np.random.default_rng(seed),
                              shape=enc.mu.shape)
            out = self.vae.decode(z * (1.0 / scale), enc.skip_features).data
        out = out[:, :, :h, :w]
        if not np.all(np.isfinite(out)):
            raise NumericalError("enhancement produced non-finite pixels")
        return np.clip(out, 0.0, 1.0)

    def enhance_frame(self, frame: RawFrame, guidance: D.GuidanceConfig = D.GuidanceConfig(),
                      steps: int = 50, seed: int = 0) -> ImagePlane:
        lrgb = isp.raw_to_lrgb(frame).data.transpose(2, 0, 1)[None]
        out = self.enhance_batch(lrgb, guidance, steps, seed)[0]
        return ImagePlane(out.transpose(1, 2, 0), isp.SRGB)


def enhance_image(raw_path, vae_checkpoint, unet_checkpoint, out_path, guidance: float = 2.0,
                  steps: int = 50, seed: int = 0, null_seed: int = 0) -> Path:
    """Enhance one raw file (PGM + sidecar) and write the sRGB result (PNG or PPM)."""
    frame = load_raw(raw_path)
    enh = Enhancer.from_checkpoints(vae_checkpoint, unet_checkpoint)
    img = enh.enhance_frame(frame, D.GuidanceConfig(guidance, null_seed), steps, seed)
    write_image(out_path, img)
    return Path(out_path)


@dataclass
class EvalReport:
    names: List[str] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    runtime: List[float] = field(default_factory=list)
    # not computed here; reserved for external tools
    lpips: Optional[List[float]] = None

    def add(self, name: str, p: float, s: float, seconds: float) -> None:
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(float(s))
        self.runtime.append(float(seconds))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    @property
    def mean_runtime(self) -> float:
        return float(np.mean(self.runtime)) if self.runtime else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_psnr=self.mean_psnr, mean_ssim=self.mean_ssim, mean_runtime=self.mean_runtime,
                 mean_lpips=None)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate(pairs, predict, names=None) -> EvalReport:
    """Score ``predict(noisy_frame) -> sRGB ImagePlane`` against each clean reference."""
    rep = EvalReport()
    for k, (noisy, clean) in enumerate(pairs):
        t0 = time.perf_counter()
        out = predict(noisy)
        dt = time.perf_counter() - t0
        ref = isp.raw_to_srgb_reference(clean)
        rep.add(names[k] if names else str(k), psnr(out, ref), ssim(out, ref), dt)
    return rep


def amplified_baseline(frame: RawFrame) -> ImagePlane:
    """The noisy input brightened by its exposure ratio and rendered with the reference ISP."""
    return isp.lrgb_to_srgb(isp.raw_to_lrgb(frame), frame.ccm)
