"""Raw Bayer to linear-RGB preprocessing and the raw-to-sRGB reference path.

Input path (network input)::

    pack_bayer -> linearize -> amplify -> white_balance -> demosaic_bin

Reference path (training targets, no amplification)::

    pack_bayer -> linearize -> white_balance -> demosaic_bin -> color_correct -> gamma_compress
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ColorStateError, ConfigError, ShapeError

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

PACKED = "packed-RGBG"
LINEAR = "linear-RGB"
SRGB = "sRGB"
COLOR_STATES = (PACKED, LINEAR, SRGB)


@dataclass
class RawFrame:
    mosaic: np.ndarray  # (H, W) uint16
    cfa_pattern: str = "RGGB"
    black_level: float = 512.0
    white_level: float = 16383.0
    wb_gains: tuple = (1.0, 1.0, 1.0)
    ccm: np.ndarray = field(default_factory=lambda: np.eye(3, dtype=np.float32))
    exposure_ratio: float = 1.0

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic)
        if self.mosaic.ndim != 2:
            raise ShapeError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        if self.mosaic.dtype != np.uint16:
            if self.mosaic.size and (self.mosaic.min() < 0 or self.mosaic.max() > 65535):
                raise ConfigError("mosaic values must fit in 16 bits")
            self.mosaic = self.mosaic.astype(np.uint16)
        if self.cfa_pattern not in CFA_PATTERNS:
            raise ConfigError(f"unknown CFA pattern {self.cfa_pattern!r}; expected one of {CFA_PATTERNS}")
        if not self.black_level < self.white_level:
            raise ConfigError(f"black level {self.black_level} must be below white level {self.white_level}")
        self.wb_gains = tuple(float(g) for g in self.wb_gains)
        if len(self.wb_gains) != 3 or min(self.wb_gains) <= 0:
            raise ConfigError(f"white-balance gains must be three positive numbers, got {self.wb_gains}")
        self.ccm = np.asarray(self.ccm, dtype=np.float32).reshape(3, 3)
        if self.exposure_ratio < 1:
            raise ConfigError(f"exposure ratio must be >= 1, got {self.exposure_ratio}")

    @property
    def height(self) -> int:
        return self.mosaic.shape[0]

    @property
    def width(self) -> int:
        return self.mosaic.shape[1]

    def with_mosaic(self, mosaic: np.ndarray, **changes) -> "RawFrame":
        return replace(self, mosaic=mosaic, **changes)


@dataclass
class ImagePlane:
    """Float image ``data`` of shape (H, W, C) tagged with its color state.

    ``normalized`` is False only for packed planes still holding raw DN values.
    """

    data: np.ndarray
    color_state: str
    normalized: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3, 4):
            raise ShapeError(f"image data must be (H, W, C) with C in 1/3/4, got {self.data.shape}")
        if self.color_state not in COLOR_STATES:
            raise ColorStateError(f"unknown color state {self.color_state!r}")
        if self.color_state == PACKED and self.channels != 4:
            raise ShapeError(f"packed-RGBG planes need 4 channels, got {self.channels}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _require(img: ImagePlane, *states: str, normalized: Optional[bool] = True) -> None:
    if img.color_state not in states:
        raise ColorStateError(f"expected color state {' or '.join(states)}, got {img.color_state}")
    if normalized is not None and img.normalized != normalized:
        what = "normalized" if normalized else "raw-DN"
        raise ColorStateError(f"expected a {what} {img.color_state} plane")


def cfa_offsets(pattern: str) -> dict:
    """Map R, G1, G2, B to their (row, col) offsets inside the 2x2 CFA tile."""
    if pattern not in CFA_PATTERNS:
        raise ConfigError(f"unknown CFA pattern {pattern!r}")
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    greens = [c for c, ch in zip(cells, pattern) if ch == "G"]
    return {"R": cells[pattern.index("R")], "G1": greens[0], "G2": greens[1],
            "B": cells[pattern.index("B")]}


def pack_bayer(frame: RawFrame) -> ImagePlane:
    if frame.height % 2 or frame.width % 2:
        raise ShapeError(f"Bayer mosaic extents must be even, got {frame.height}x{frame.width}")
    offs = cfa_offsets(frame.cfa_pattern)
    m = frame.mosaic
    planes = [m[r::2, c::2] for r, c in (offs[k] for k in ("R", "G1", "G2", "B"))]
    return ImagePlane(np.stack(planes, axis=-1).astype(np.float32), PACKED, normalized=False)


def unpack_bayer(packed: ImagePlane, cfa_pattern: str = "RGGB") -> np.ndarray:
    """Inverse of :func:`pack_bayer` for raw-DN planes; returns a uint16 mosaic."""
    _require(packed, PACKED, normalized=None)
    h, w, _ = packed.data.shape
    mosaic = np.empty((2 * h, 2 * w), dtype=np.uint16)
    offs = cfa_offsets(cfa_pattern)
    for ch, key in enumerate(("R", "G1", "G2", "B")):
        r, c = offs[key]
        mosaic[r::2, c::2] = np.rint(packed.data[..., ch]).astype(np.uint16)
    return mosaic


def linearize(packed: ImagePlane, black_level: float, white_level: float) -> ImagePlane:
    if not white_level > black_level:
        raise ConfigError(f"white level {white_level} must exceed black level {black_level}")
    _require(packed, PACKED, normalized=False)
    v = (packed.data.astype(np.float64) - black_level) / (white_level - black_level)
    return ImagePlane(np.clip(v, 0.0, 1.0), PACKED)


def amplify(img: ImagePlane, ratio: float) -> ImagePlane:
    if ratio < 1:
        raise ConfigError(f"amplification ratio must be >= 1, got {ratio}")
    _require(img, PACKED, LINEAR)
    return ImagePlane(np.minimum(1.0, img.data.astype(np.float64) * ratio), img.color_state)


def white_balance(packed: ImagePlane, gains: Sequence[float]) -> ImagePlane:
    gains = tuple(float(g) for g in gains)
    if len(gains) != 3 or min(gains) <= 0:
        raise ConfigError(f"white-balance gains must be three positive numbers, got {gains}")
    _require(packed, PACKED)
    g = np.array([gains[0], gains[1], gains[1], gains[2]])
    return ImagePlane(np.clip(packed.data.astype(np.float64) * g, 0.0, 1.0), PACKED)


def demosaic_bin(packed: ImagePlane) -> ImagePlane:
    if packed.channels != 4:
        raise ShapeError(f"binning needs 4 packed channels, got {packed.channels}")
    _require(packed, PACKED)
    d = packed.data
    rgb = np.stack([d[..., 0], (d[..., 1] + d[..., 2]) * np.float32(0.5), d[..., 3]], axis=-1)
    return ImagePlane(rgb, LINEAR)


def color_correct(lrgb: ImagePlane, ccm) -> ImagePlane:
    _require(lrgb, LINEAR)
    ccm = np.asarray(ccm, dtype=np.float64).reshape(3, 3)
    out = lrgb.data.astype(np.float64) @ ccm.T
    return ImagePlane(np.clip(out, 0.0, 1.0), LINEAR)


_SRGB_THRESHOLD = 0.0031308


def srgb_encode(v: np.ndarray) -> np.ndarray:
    """sRGB transfer function on plain arrays (input assumed in [0, 1])."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= _SRGB_THRESHOLD, 12.92 * v,
                    1.055 * np.power(np.maximum(v, _SRGB_THRESHOLD), 1.0 / 2.4) - 0.055)


def srgb_decode(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 12.92 * _SRGB_THRESHOLD, v / 12.92,
                    np.power((np.maximum(v, 12.92 * _SRGB_THRESHOLD) + 0.055) / 1.055, 2.4))


def gamma_compress(lrgb: ImagePlane) -> ImagePlane:
    _require(lrgb, LINEAR)
    return ImagePlane(np.clip(srgb_encode(np.clip(lrgb.data, 0.0, 1.0)), 0.0, 1.0), SRGB)


def gamma_expand(srgb: ImagePlane) -> ImagePlane:
    _require(srgb, SRGB)
    return ImagePlane(np.clip(srgb_decode(srgb.data), 0.0, 1.0), LINEAR)


def raw_to_lrgb(frame: RawFrame, ratio: Optional[float] = None) -> ImagePlane:
    """Brightened linear RGB at half mosaic resolution (the network input)."""
    ratio = frame.exposure_ratio if ratio is None else ratio
    packed = linearize(pack_bayer(frame), frame.black_level, frame.white_level)
    return demosaic_bin(white_balance(amplify(packed, ratio), frame.wb_gains))


def raw_to_srgb_reference(frame: RawFrame) -> ImagePlane:
    """Display-referred target: no amplification, color correction plus gamma."""
    packed = linearize(pack_bayer(frame), frame.black_level, frame.white_level)
    lrgb = demosaic_bin(white_balance(packed, frame.wb_gains))
    return gamma_compress(color_correct(lrgb, frame.ccm))


def lrgb_to_srgb(lrgb: ImagePlane, ccm) -> ImagePlane:
    """Finish a linear-RGB plane with the reference color correction and gamma."""
    return gamma_compress(color_correct(lrgb, ccm))
