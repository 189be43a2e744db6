"""Synthetic short-exposure capture: Poisson shot noise plus Gaussian read noise.

Randomness comes from numpy's Philox4x64 counter-based generator keyed by a
64-bit seed. Pair ``j`` of image ``i`` in :func:`make_dataset` uses the key
``(seed ^ i, j)``, so every pair can be regenerated independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import isp
from .errors import ConfigError
from .isp import ImagePlane, RawFrame
from .rawio import load_raw, save_raw


@dataclass(frozen=True)
class SensorNoiseParams:
    system_gain: float = 2.0  # K, DN per photoelectron
    read_sigma: float = 4.0  # DN
    black_level: float = 512.0
    white_level: float = 16383.0
    seed: int = 0

    def __post_init__(self):
        if not self.system_gain > 0:
            raise ConfigError(f"system gain must be positive, got {self.system_gain}")
        if self.read_sigma < 0:
            raise ConfigError(f"read noise sigma must be non-negative, got {self.read_sigma}")
        if not self.black_level < self.white_level:
            raise ConfigError("black level must be below white level")


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def degrade(clean: RawFrame, exposure_ratio: float, params: SensorNoiseParams,
            rng: Optional[np.random.Generator] = None) -> RawFrame:
    """Simulate a capture ``exposure_ratio`` times shorter than ``clean``."""
    if exposure_ratio < 1:
        raise ConfigError(f"exposure ratio must be >= 1, got {exposure_ratio}")
    rng = rng if rng is not None else philox(params.seed)
    signal = np.maximum(clean.mosaic.astype(np.float64) - clean.black_level, 0.0) / exposure_ratio
    electrons = rng.poisson(signal / params.system_gain)
    noisy = electrons * params.system_gain
    if params.read_sigma > 0:
        noisy = noisy + rng.normal(0.0, params.read_sigma, size=signal.shape)
    dn = np.clip(np.rint(noisy + clean.black_level), 0, clean.white_level)
    return clean.with_mosaic(dn.astype(np.uint16), exposure_ratio=float(exposure_ratio))


def mosaic_from_image(img: ImagePlane, black_level: float, white_level: float,
                      cfa_pattern: str = "RGGB", wb_gains=(1.0, 1.0, 1.0), ccm=None) -> RawFrame:
    """Build a clean Bayer frame whose reference rendering reproduces ``img``.

    sRGB input is gamma-expanded first; the color matrix and white balance are
    inverted, then green is replicated into both green sites.
    """
    ccm = np.eye(3) if ccm is None else np.asarray(ccm, np.float64).reshape(3, 3)
    if img.color_state == isp.SRGB:
        lin = isp.srgb_decode(img.data)
    elif img.color_state == isp.LINEAR:
        lin = img.data.astype(np.float64)
    else:
        raise ConfigError(f"cannot synthesise a mosaic from a {img.color_state} plane")
    if img.channels != 3:
        raise ConfigError(f"need a 3-channel image, got {img.channels}")
    cam = lin @ np.linalg.inv(ccm).T / np.asarray(wb_gains, np.float64)
    cam = np.clip(cam, 0.0, 1.0)
    rggb = np.stack([cam[..., 0], cam[..., 1], cam[..., 1], cam[..., 2]], axis=-1)
    dn = ImagePlane(black_level + rggb * (white_level - black_level), isp.PACKED, normalized=False)
    mosaic = isp.unpack_bayer(dn, cfa_pattern)
    return RawFrame(mosaic=mosaic, cfa_pattern=cfa_pattern, black_level=black_level,
                    white_level=white_level, wb_gains=tuple(wb_gains), ccm=ccm, exposure_ratio=1.0)


def make_dataset(clean_images: Sequence[ImagePlane], ratios: Sequence[float],
                 params: SensorNoiseParams, cfa_pattern: str = "RGGB",
                 wb_gains=(1.0, 1.0, 1.0), ccm=None) -> List[Tuple[RawFrame, RawFrame]]:
    """One (noisy, clean) pair per (image, ratio)."""
    if not clean_images or not ratios:
        raise ConfigError("make_dataset needs at least one image and one ratio")
    pairs = []
    for i, img in enumerate(clean_images):
        clean = mosaic_from_image(img, params.black_level, params.white_level, cfa_pattern, wb_gains, ccm)
        for j, ratio in enumerate(ratios):
            noisy = degrade(clean, ratio, params, rng=philox(params.seed ^ i, j))
            pairs.append((noisy, clean))
    return pairs


def write_dataset(pairs: Iterable[Tuple[RawFrame, RawFrame]], out_dir, prefix: str = "pair") -> Path:
    """Write raws as PGM + sidecar and return the path of ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k, (noisy, clean) in enumerate(pairs):
        n_path = out / f"{prefix}{k:05d}_noisy.pgm"
        c_path = out / f"{prefix}{k:05d}_clean.pgm"
        save_raw(n_path, noisy)
        save_raw(c_path, clean)
        manifest.append({"noisy": n_path.name, "clean": c_path.name})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> List[Tuple[RawFrame, RawFrame]]:
    path = Path(path)
    entries = json.loads(path.read_text())
    if not entries:
        raise ConfigError(f"manifest {path} lists no pairs")
    return [(load_raw(path.parent / e["noisy"]), load_raw(path.parent / e["clean"])) for e in entries]
