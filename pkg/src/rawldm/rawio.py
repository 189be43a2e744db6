"""File containers: 16-bit PGM + JSON sidecar for raws, PNG/PPM for images."""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import ConfigError, MetadataError, ShapeError
from .isp import SRGB, ImagePlane, RawFrame

PathLike = Union[str, os.PathLike]

_SIDECAR_KEYS = ("cfa_pattern", "black_level", "white_level", "wb_gains", "ccm", "exposure_ratio")


def sidecar_path(raw_path: PathLike) -> Path:
    p = Path(raw_path)
    return p.with_name(p.stem + ".meta.json")


def _read_netpbm_header(buf: bytes, magic: bytes):
    # header tokens: magic, width, height, maxval; comments start with '#'
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(buf, pos)
        if m is None:
            raise ShapeError("truncated netpbm header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise ShapeError(f"expected netpbm magic {magic!r}, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    return width, height, maxval, pos + 1  # single whitespace byte ends the header


def write_pgm16(path: PathLike, mosaic: np.ndarray) -> None:
    mosaic = np.asarray(mosaic)
    if mosaic.ndim != 2:
        raise ShapeError(f"PGM payload must be 2-D, got {mosaic.shape}")
    h, w = mosaic.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(mosaic.astype(">u2").tobytes())


def read_pgm16(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, offset = _read_netpbm_header(buf, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(h, w).astype(np.uint16)


def save_raw(path: PathLike, frame: RawFrame) -> None:
    write_pgm16(path, frame.mosaic)
    meta = {
        "cfa_pattern": frame.cfa_pattern,
        "black_level": float(frame.black_level),
        "white_level": float(frame.white_level),
        "wb_gains": [float(g) for g in frame.wb_gains],
        "ccm": [float(v) for v in np.asarray(frame.ccm).reshape(-1)],
        "exposure_ratio": float(frame.exposure_ratio),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_raw(path: PathLike) -> RawFrame:
    side = sidecar_path(path)
    if not side.exists():
        raise MetadataError(f"missing metadata sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise MetadataError(f"sidecar {side} is not valid JSON: {exc}") from exc
    missing = [k for k in _SIDECAR_KEYS if k not in meta]
    if missing:
        raise MetadataError(f"sidecar {side} lacks keys {missing}")
    if len(meta["ccm"]) != 9:
        raise MetadataError(f"sidecar {side}: ccm needs 9 values, got {len(meta['ccm'])}")
    return RawFrame(
        mosaic=read_pgm16(path),
        cfa_pattern=meta["cfa_pattern"],
        black_level=meta["black_level"],
        white_level=meta["white_level"],
        wb_gains=tuple(meta["wb_gains"]),
        ccm=np.asarray(meta["ccm"], dtype=np.float32).reshape(3, 3),
        exposure_ratio=meta["exposure_ratio"],
    )


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: PathLike, img: Union[ImagePlane, np.ndarray]) -> None:
    """Write an 8-bit RGB image; the extension picks PNG or binary PPM."""
    data = img.data if isinstance(img, ImagePlane) else np.asarray(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {data.shape}")
    pixels = to_uint8(data)
    ext = Path(path).suffix.lower()
    if ext == ".png":
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    elif ext == ".ppm":
        h, w, _ = pixels.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    else:
        raise ConfigError(f"unsupported image extension {ext!r}; use .png or .ppm")


def read_image(path: PathLike) -> ImagePlane:
    ext = Path(path).suffix.lower()
    if ext == ".ppm":
        buf = Path(path).read_bytes()
        w, h, _, offset = _read_netpbm_header(buf, b"P6")
        pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset).reshape(h, w, 3)
    elif ext == ".png":
        pixels = np.asarray(Image.open(path).convert("RGB"))
    else:
        raise ConfigError(f"unsupported image extension {ext!r}; use .png or .ppm")
    return ImagePlane(pixels.astype(np.float32) / 255.0, SRGB)
