"""Seeded synthetic low-light scenes for desk-scale runs and fixtures."""

from __future__ import annotations

import numpy as np


def smooth_scene(rng: np.random.Generator, h: int, w: int, n_blobs: int = 4) -> np.ndarray:
    """Low-frequency colored scene in [0, 1]: a tilted gradient plus Gaussian blobs."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.2, 0.5, 3)
    tilt = rng.uniform(-0.3, 0.3, (2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.15, 0.35)
        amp = rng.uniform(-0.3, 0.5, 3)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
    return np.clip(img, 0.0, 1.0)


def low_light_image(rng: np.random.Generator, h: int = 64, w: int = 64, mean: float = 0.15,
                    noise: tuple = (0.02, 0.05)) -> np.ndarray:
    """Darkened scene with the requested mean intensity and additive Gaussian noise."""
    scene = smooth_scene(rng, h, w)
    img = scene * (mean / max(scene.mean(), 1e-6))
    sigma = rng.uniform(*noise) if noise else 0.0
    if sigma:
        img = img + rng.normal(0.0, sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    # re-center after clipping so the mean is exact
    return np.clip(img + (mean - img.mean()), 0.0, 1.0)


def low_light_set(n: int, seed: int = 0, **kwargs) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [low_light_image(rng, **kwargs) for _ in range(n)]
