"""Procedural RGB test images for smoke runs and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .tensor import Xoshiro256


def toy_image(size: int, seed: int) -> np.ndarray:
    """(1, 3, size, size) float32 image in [0, 1], quantized to 8-bit levels.

    A colour gradient overlaid with two sinusoid gratings and a few flat
    discs and boxes, so it has both smooth regions and hard edges.
    """
    rng = Xoshiro256(seed)
    u = rng.uniform_array(64)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = 0.25 + 0.5 * (u[c] * xx + u[c + 3] * yy) / 2
    for k in range(2):
        theta = 2 * np.pi * u[6 + k]
        freq = 3 + 9 * u[8 + k]
        phase = 2 * np.pi * u[10 + k]
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += 0.12 * wave[None] * u[12 + 3 * k:15 + 3 * k, None, None]
    for k in range(4):
        cy, cx, rad = u[20 + 3 * k], u[21 + 3 * k], 0.08 + 0.15 * u[22 + 3 * k]
        colour = u[40 + 3 * k:43 + 3 * k]
        if k % 2:
            mask = (np.abs(yy - cy) < rad) & (np.abs(xx - cx) < rad * 0.7)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        img[:, mask] = colour[:, None]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img[None].astype(np.float32)


def toy_dataset(count: int, size: int, seed: int = 0) -> list[np.ndarray]:
    return [toy_image(size, seed * 1000 + i) for i in range(count)]
