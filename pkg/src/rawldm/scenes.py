"""Procedural sRGB test scenes: gradients, flat shapes, stripes and text-like marks."""

from __future__ import annotations

import numpy as np

from .isp import SRGB, ImagePlane


def _color(rng, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=3)


def random_scene(rng: np.random.Generator, size: int = 64) -> ImagePlane:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    c0, c1 = _color(rng), _color(rng)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]

    for _ in range(rng.integers(2, 6)):
        kind = rng.integers(0, 4)
        col = _color(rng)
        cx, cy = rng.uniform(0, 1, 2)
        if kind == 0:
            r = rng.uniform(0.08, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        elif kind == 1:
            w, h = rng.uniform(0.1, 0.5, 2)
            mask = (np.abs(xx - cx) < w / 2) & (np.abs(yy - cy) < h / 2)
        elif kind == 2:
            period = rng.uniform(0.06, 0.2)
            theta = rng.uniform(0, np.pi)
            phase = (np.cos(theta) * xx + np.sin(theta) * yy) / period
            r = rng.uniform(0.15, 0.4)
            mask = (np.sin(2 * np.pi * phase) > 0) & ((xx - cx) ** 2 + (yy - cy) ** 2 < r * r)
        else:
            # thin strokes, a stand-in for lettering
            mask = np.zeros((size, size), bool)
            for _ in range(rng.integers(2, 5)):
                x0, y0 = rng.integers(0, size, 2)
                length = rng.integers(size // 8, size // 3)
                if rng.random() < 0.5:
                    mask[y0:y0 + 2, x0:x0 + length] = True
                else:
                    mask[y0:y0 + length, x0:x0 + 2] = True
        img = np.where(mask[..., None], col, img)
    return ImagePlane(np.clip(img, 0, 1).astype(np.float32), SRGB)


def scene_batch(count: int, size: int = 64, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [random_scene(rng, size) for _ in range(count)]
