"""Deterministic synthetic ground-truth images for tests and demos."""

import numpy as np
from scipy import ndimage

from .imagecore import pixel_grid


def textured_scene(size=128, seed=0):
    """Piecewise-smooth scene: shaded background, random discs and bars, fine texture.

    Intensities stay inside [0.05, 0.95] so clamping does not hide errors.
    """
    rng = np.random.default_rng(seed)
    h = w = size
    z = pixel_grid((h, w))
    x, y = z.real / w, z.imag / h
    img = 0.35 + 0.2 * x + 0.1 * np.sin(2 * np.pi * y * rng.uniform(0.5, 1.5))
    for _ in range(6):
        c = rng.uniform(0.15, 0.85) * w + 1j * rng.uniform(0.15, 0.85) * h
        r = rng.uniform(0.05, 0.15) * size
        img = np.where(np.abs(z - c) < r, rng.uniform(0.1, 0.9), img)
    for _ in range(4):
        r0, c0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        img[r0:r0 + rng.integers(3, 8), c0:c0 + rng.integers(15, 40)] = rng.uniform(0.1, 0.9)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0)
    img = img + 0.08 * texture / max(np.abs(texture).max(), 1e-12)
    img = ndimage.gaussian_filter(img, 0.7)
    return np.clip(img, 0.05, 0.95)


def smooth_scene(size=64, seed=0, sigma=3.0):
    """Band-limited random field rescaled to [0.1, 0.9]; good for flow fixtures."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.1 + 0.8 * img


def edge_scene(size=128, seed=0):
    """Sharp piecewise-constant scene: blocks with window grids, discs and thin bars.

    No smoothing is applied, so edges are one pixel wide and the gradient
    field is sparse.
    """
    rng = np.random.default_rng(seed)
    h = w = size
    z = pixel_grid((h, w))
    img = np.full((h, w), rng.uniform(0.25, 0.45))
    for _ in range(5):
        r0, c0 = rng.integers(0, h - size // 4, 2)
        bh, bw = rng.integers(size // 8, size // 3, 2)
        level = rng.uniform(0.1, 0.9)
        img[r0:r0 + bh, c0:c0 + bw] = level
        # window grid inside the block
        step = int(rng.integers(4, 8))
        shade = np.clip(level + rng.choice([-1, 1]) * rng.uniform(0.2, 0.4), 0.05, 0.95)
        for rr in range(r0 + 2, r0 + bh - 3, step):
            for cc in range(c0 + 2, c0 + bw - 3, step):
                img[rr:rr + 2, cc:cc + 2] = shade
    for _ in range(6):
        c = rng.uniform(0, w) + 1j * rng.uniform(0, h)
        img = np.where(np.abs(z - c) < rng.uniform(0.03, 0.1) * size, rng.uniform(0.1, 0.9), img)
    for _ in range(6):
        r0, c0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        if rng.random() < 0.5:
            img[r0:r0 + 1 + rng.integers(0, 2), c0:c0 + rng.integers(10, 40)] = rng.uniform(0.1, 0.9)
        else:
            img[r0:r0 + rng.integers(10, 40), c0:c0 + 1 + rng.integers(0, 2)] = rng.uniform(0.1, 0.9)
    return np.clip(img, 0.05, 0.95)
