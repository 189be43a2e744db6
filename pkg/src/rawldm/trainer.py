"""Two-stage training: the residual VAE first, then the latent denoiser.

Stage 1 fits the VAE to map noisy linear RGB to clean sRGB. Stage 2 freezes
it, encodes the clean linear RGB image as the diffusion target and the noisy
one as the condition, and trains the U-Net plus context processor with the
noise-prediction loss and the decoded-image loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffusion as D
from . import isp
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, module_checkpoint, save_checkpoint
from .denoiser import UNet, UNetConfig
from .errors import ConfigError, IncompatibleCheckpointError
from .isp import RawFrame
from .optim import Adam
from .tensor import Tensor
from .vae import ResidualVAE, VaeConfig, stage1_loss

log = logging.getLogger(__name__)

TARGETS = ("clean_lrgb", "clean_srgb")


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    batch_size: int = 8
    crop_size: int = 64
    lr_main: float = 1e-3
    # stage 2 only: rate for the context processor and attention blocks
    lr_new: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.9
    lam: float = 1.0
    cond_dropout_prob: float = 0.05
    seed: int = 0
    manifest: Optional[str] = None
    vae_checkpoint: Optional[str] = None
    out_checkpoint: Optional[str] = None
    loss_log: Optional[str] = None
    # image loss only for samples whose timestep is at most this fraction of T
    image_loss_max_t: float = 0.5
    # which clean image is encoded to form the diffusion target
    target: str = "clean_lrgb"
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # "cosine" anneals every group's rate to lr_floor times its start value; "constant" keeps it
    lr_schedule: str = "cosine"
    lr_floor: float = 0.05
    vae: dict = field(default_factory=dict)
    unet: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0 <= self.cond_dropout_prob <= 1:
            raise ConfigError(f"condition dropout probability must lie in [0, 1], got {self.cond_dropout_prob}")
        if self.epochs < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ConfigError("epochs, batch size and crop size must be positive")
        if self.lr_main <= 0 or self.lr_new <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        f = self.vae_config().downsample_factor
        if self.crop_size % f:
            raise ConfigError(f"crop size {self.crop_size} is not divisible by the VAE factor {f}")

    def vae_config(self) -> VaeConfig:
        return VaeConfig.from_dict(self.vae) if self.vae else VaeConfig()

    def unet_config(self) -> UNetConfig:
        return UNetConfig.from_dict(self.unet) if self.unet else UNetConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def reference_config(stage: int) -> TrainConfig:
    """Full-scale hyperparameters from the original training recipe, kept for the record.

    Stage 1: Adam lr 4e-5 with betas (0.5, 0.9), 3000 epochs, 1200x1200 crops.
    Stage 2: 2.5e-4 for the context processor and attention, 5e-5 elsewhere.
    The toy VAE cannot take 1200-pixel crops on a CPU in reasonable time; the
    values are documentation, not a runnable toy setting.
    """
    vae = VaeConfig(channel_multipliers=(1, 2, 4, 4)).to_dict()
    if stage == 1:
        return TrainConfig(stage=1, epochs=3000, crop_size=1200, lr_main=4e-5, beta1=0.5, beta2=0.9, vae=vae)
    return TrainConfig(stage=2, epochs=3000, crop_size=1200, lr_main=5e-5, lr_new=2.5e-4, beta1=0.5, beta2=0.9,
                       cond_dropout_prob=0.05, vae=vae)


def toy_config(stage: int, **overrides) -> TrainConfig:
    """Settings that train the default toy models on 200 64x64 pairs in minutes on one CPU core.

    Stage 1 uses 32x32 crops: four times cheaper per step than full frames
    and, at equal wall time, it reached a lower test error in tuning runs.
    """
    if stage == 1:
        base = dict(stage=1, epochs=60, batch_size=8, crop_size=32, lr_main=2e-3)
    else:
        base = dict(stage=2, epochs=60, batch_size=8, crop_size=64, lr_main=4e-4, lr_new=2e-3)
    base.update(overrides)
    return TrainConfig(**base)


class PairDataset:
    """Training arrays derived from (noisy, clean) raw pairs, all (N, 3, H, W) float32.

    ``noisy_lrgb`` is brightened by each frame's exposure ratio; ``clean_lrgb``
    and ``clean_srgb`` come from the long exposure.
    """

    def __init__(self, pairs: Sequence[Tuple[RawFrame, RawFrame]]):
        if not pairs:
            raise ConfigError("dataset is empty")
        to = lambda p: p.data.transpose(2, 0, 1).astype(np.float32)
        self.noisy_lrgb = np.stack([to(isp.raw_to_lrgb(n)) for n, _ in pairs])
        self.clean_lrgb = np.stack([to(isp.raw_to_lrgb(c)) for _, c in pairs])
        self.clean_srgb = np.stack([to(isp.raw_to_srgb_reference(c)) for _, c in pairs])

    @classmethod
    def from_manifest(cls, path) -> "PairDataset":
        from .noisesynth import read_manifest
        return cls(read_manifest(path))

    def __len__(self) -> int:
        return len(self.noisy_lrgb)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.noisy_lrgb.shape[2], self.noisy_lrgb.shape[3]


class _LrSchedule:
    def __init__(self, opt: Adam, cfg: TrainConfig, total_steps: int):
        self.opt = opt
        self.base = [state.lr for _, state in opt.groups]
        self.cosine = cfg.lr_schedule == "cosine"
        self.floor = cfg.lr_floor
        self.total = max(total_steps, 1)

    def set(self, step: int) -> None:
        if not self.cosine:
            return
        f = self.floor + (1 - self.floor) * 0.5 * (1 + math.cos(math.pi * min(step, self.total) / self.total))
        for (_, state), lr in zip(self.opt.groups, self.base):
            state.lr = lr * f


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _crop_offsets(rng: np.random.Generator, size: Tuple[int, int], crop: int, count: int):
    h, w = size
    if crop > h or crop > w:
        raise ConfigError(f"crop size {crop} exceeds image size {h}x{w}")
    return rng.integers(0, h - crop + 1, size=count), rng.integers(0, w - crop + 1, size=count)


def _crop(arrays, idx, ys, xs, crop):
    return [np.stack([a[i, :, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)]) for a in arrays]


class LossLog:
    """CSV with one row per optimiser step: epoch, step, L_LDM, L_image, total."""

    HEADER = ["epoch", "step", "L_LDM", "L_image", "total"]

    def __init__(self, path=None):
        self.rows: List[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def add(self, epoch: int, step: int, l_ldm, l_image, total: float) -> None:
        row = {"epoch": epoch, "step": step, "L_LDM": l_ldm, "L_image": l_image, "total": total}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(["" if row[k] is None else row[k] for k in self.HEADER])

    def epoch_means(self, key: str = "total") -> List[float]:
        out = {}
        for r in self.rows:
            if r[key] is not None:
                out.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    log: LossLog
    dropout_count: int = 0
    samples_seen: int = 0


def _vae_ckpt_config(cfg: TrainConfig, vae_cfg: VaeConfig) -> dict:
    return {"vae": vae_cfg.to_dict(), "train": cfg.to_dict()}


def train_stage1(cfg: TrainConfig, dataset: PairDataset) -> TrainResult:
    """Fit the residual VAE on (noisy linear RGB -> clean sRGB)."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    vae_cfg = cfg.vae_config()
    model = ResidualVAE(vae_cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.trainable_parameters(), lr=cfg.lr_main, betas=(cfg.beta1, cfg.beta2))
    log_ = LossLog(cfg.loss_log)
    sched = _LrSchedule(opt, cfg, cfg.epochs * math.ceil(len(dataset) / cfg.batch_size))
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            sched.set(step)
            ys, xs = _crop_offsets(rng, dataset.image_size, cfg.crop_size, len(idx))
            noisy, clean = _crop([dataset.noisy_lrgb, dataset.clean_srgb], idx, ys, xs, cfg.crop_size)
            loss, terms = stage1_loss(Tensor(noisy), Tensor(clean), model, rng, return_terms=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_.add(epoch, step, None, terms["reconstruction"], loss.item())
            step += 1
        log.info("stage 1 epoch %d: loss %.5f", epoch, log_.epoch_means()[-1] if log_.rows else float("nan"))
    ckpt = module_checkpoint("vae", model, _vae_ckpt_config(cfg, vae_cfg))
    if cfg.out_checkpoint:
        save_checkpoint(cfg.out_checkpoint, ckpt)
    return TrainResult(model, ckpt, log_)


def load_vae(source) -> Tuple[ResidualVAE, Checkpoint]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    if ckpt.kind != "vae":
        raise IncompatibleCheckpointError(f"expected a VAE checkpoint, got kind {ckpt.kind!r}")
    model = ResidualVAE(VaeConfig.from_dict(ckpt.config["vae"]))
    model.load_state_dict(ckpt.tensors)
    return model, ckpt


def load_unet(source) -> Tuple[UNet, Checkpoint]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    if ckpt.kind != "unet":
        raise IncompatibleCheckpointError(f"expected a U-Net checkpoint, got kind {ckpt.kind!r}")
    model = UNet(UNetConfig.from_dict(ckpt.config["unet"]))
    model.load_state_dict(ckpt.tensors)
    return model, ckpt


def condition_dropout(z_y: np.ndarray, prob: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Replace each sample's condition latent by standard Gaussian noise with probability ``prob``."""
    mask = rng.random(z_y.shape[0]) < prob
    out = z_y.copy()
    if mask.any():
        out[mask] = rng.standard_normal((int(mask.sum()),) + z_y.shape[1:]).astype(z_y.dtype)
    return out, mask


class _Encoded:
    """Frozen-VAE encodings of a batch: condition latent, target latent, skip features."""

    def __init__(self, vae: ResidualVAE, noisy: np.ndarray, clean: np.ndarray, chunk: int = 16):
        mus, tgt, skips = [], [], None
        with T.no_grad():
            for i in range(0, len(noisy), chunk):
                enc = vae.encode(Tensor(noisy[i:i + chunk]))
                mus.append(enc.mu.data)
                feats = [f.data for f in enc.skip_features]
                skips = [[f] for f in feats] if skips is None else [s + [f] for s, f in zip(skips, feats)]
                tgt.append(vae.encode(Tensor(clean[i:i + chunk])).mu.data)
        self.cond = np.concatenate(mus)
        self.target = np.concatenate(tgt)
        self.skips = [np.concatenate(s) for s in skips]

    def take(self, idx):
        return self.cond[idx], self.target[idx], [s[idx] for s in self.skips]


def stage2_optimizer(unet: UNet, cfg: TrainConfig) -> Adam:
    """Context processor and attention blocks at ``lr_new``; the rest of the U-Net at ``lr_main``."""
    return Adam([{"params": unet.new_parameters(), "lr": cfg.lr_new},
                 {"params": unet.backbone_parameters(), "lr": cfg.lr_main}], betas=(cfg.beta1, cfg.beta2))


def estimate_latent_scale(latents: np.ndarray) -> float:
    std = float(latents.std())
    return 1.0 / std if std > 0 else 1.0


def train_stage2(cfg: TrainConfig, dataset: PairDataset, vae_checkpoint) -> TrainResult:
    """Train the U-Net and context processor against a frozen stage-1 VAE."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    vae, vae_ckpt = load_vae(vae_checkpoint)
    vae.freeze()
    rng = np.random.default_rng(cfg.seed)
    schedule = D.make_linear_schedule(cfg.num_timesteps, cfg.beta_start, cfg.beta_end)
    target_imgs = dataset.clean_lrgb if cfg.target == "clean_lrgb" else dataset.clean_srgb
    full = cfg.crop_size == dataset.image_size[0] == dataset.image_size[1]
    cache = _Encoded(vae, dataset.noisy_lrgb, target_imgs) if full else None

    ucfg = cfg.unet_config()
    ucfg.num_timesteps = cfg.num_timesteps
    ucfg.latent_channels = vae.cfg.latent_channels
    if cache is not None:
        ucfg.latent_scale = estimate_latent_scale(cache.target)
    else:
        probe = _Encoded(vae, dataset.noisy_lrgb[:64], target_imgs[:64])
        ucfg.latent_scale = estimate_latent_scale(probe.target)
    unet = UNet(ucfg)
    scale = ucfg.latent_scale
    opt = stage2_optimizer(unet, cfg)
    decode = lambda z, skips: vae.decode(z * (1.0 / scale), skips)
    log_ = LossLog(cfg.loss_log)
    t_img = int(math.floor(cfg.image_loss_max_t * cfg.num_timesteps))
    sched = _LrSchedule(opt, cfg, cfg.epochs * math.ceil(len(dataset) / cfg.batch_size))
    dropped = seen = step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            sched.set(step)
            if cache is not None:
                z_y, z0, skips = cache.take(idx)
                x_clean = dataset.clean_srgb[idx]
            else:
                ys, xs = _crop_offsets(rng, dataset.image_size, cfg.crop_size, len(idx))
                noisy, tgt, x_clean = _crop([dataset.noisy_lrgb, target_imgs, dataset.clean_srgb], idx, ys, xs,
                                            cfg.crop_size)
                z_y, z0, skips = _Encoded(vae, noisy, tgt).take(slice(None))
            z_y, mask = condition_dropout(z_y * scale, cfg.cond_dropout_prob, rng)
            dropped += int(mask.sum())
            seen += len(idx)
            t = rng.integers(1, cfg.num_timesteps + 1, size=len(idx))
            cond = unet.condition(Tensor(z_y))
            l_ldm, z_t, eps = D.ldm_loss(unet, schedule, Tensor(z0 * scale), cond, t, rng, return_parts=True)
            sel = np.flatnonzero(t <= t_img)
            l_img = None
            if cfg.lam > 0 and len(sel):
                z_hat = D.one_step_z0(schedule, z_t[sel], t[sel], eps[sel])
                l_img = D.image_loss(decode, z_hat, [Tensor(s[sel]) for s in skips], Tensor(x_clean[sel]))
            total = D.combined_loss(l_ldm, l_img, cfg.lam)
            opt.zero_grad()
            total.backward()
            opt.step()
            log_.add(epoch, step, l_ldm.item(), None if l_img is None else l_img.item(), total.item())
            step += 1
        log.info("stage 2 epoch %d: L_LDM %.5f", epoch, log_.epoch_means("L_LDM")[-1] if log_.rows else float("nan"))
    config = {"unet": ucfg.to_dict(), "train": cfg.to_dict(), "vae_hash": vae_ckpt.config_hash()}
    ckpt = module_checkpoint("unet", unet, config)
    if cfg.out_checkpoint:
        save_checkpoint(cfg.out_checkpoint, ckpt)
    return TrainResult(unet, ckpt, log_, dropped, seen)
