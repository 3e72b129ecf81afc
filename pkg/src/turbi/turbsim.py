"""Synthetic turbulence: random smooth deformations, blur and optional noise.

A deformation is a sum of Gaussian-windowed constant motion patches. Each
patch carries a standard-normal 2-vector, is windowed by a peak-one Gaussian
(sigma = patch / 6) whose center is jittered inside the patch, and is scaled
by the frame's strength. Overlapping patches add up.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_image
from .imagecore import gaussian_blur, warp


@dataclass(frozen=True)
class TurbulenceParams:
    """Simulator settings; strengths are in pixels per unit motion vector."""

    patch_size: int = 65
    positions_divisor: float = 250.0
    strength_range_severe: tuple[float, float] = (1.0, 1.5)
    strength_range_mild: tuple[float, float] = (0.2, 0.3)
    gaussian_blur_sigma: float = 1.0
    noise_sigma: float = 0.0
    blur_before_warp: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd integer")
        if not self.positions_divisor > 0:
            raise ValueError("positions_divisor must be > 0")
        for name in ("strength_range_severe", "strength_range_mild"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered non-negative range")
        if self.gaussian_blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be >= 0")


@dataclass
class GroundTruthBundle:
    truth: np.ndarray
    frames: np.ndarray
    fields: np.ndarray
    labels: np.ndarray  # True = severe
    strengths: np.ndarray


def position_count(width, height, params):
    return int(width * height // params.positions_divisor)


def _patch_window(size, shift):
    sigma = size / 6.0
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    return np.exp(-((x - shift[0]) ** 2 + (y - shift[1]) ** 2) / (2.0 * sigma * sigma))


def add_patch(field, center, vector, window):
    """Add ``vector * window`` centered at ``(row, col)``, clipped to the grid (in place)."""
    h, w = field.shape
    half = window.shape[0] // 2
    r, c = center
    r0, r1 = max(r - half, 0), min(r + half + 1, h)
    c0, c1 = max(c - half, 0), min(c + half + 1, w)
    field[r0:r1, c0:c1] += vector * window[r0 - r + half:r1 - r + half, c0 - c + half:c1 - c + half]
    return field


def make_field(width, height, params, strength, rng):
    """Random smooth displacement field of shape (height, width).

    Parameters
    ----------
    width, height : int
        Grid size; both must be at least ``patch_size``.
    params : TurbulenceParams
    strength : float
        Multiplier applied to every patch vector.
    rng : numpy.random.Generator

    Returns
    -------
    complex ndarray of shape (height, width)
    """
    size = params.patch_size
    if width < size or height < size:
        raise ValueError(f"image {width}x{height} is smaller than the {size}px patch")
    field = np.zeros((height, width), dtype=np.complex128)
    n = position_count(width, height, params)
    rows = rng.integers(0, height, n)
    cols = rng.integers(0, width, n)
    vecs = rng.standard_normal((n, 2))
    shifts = rng.uniform(-size / 8.0, size / 8.0, (n, 2))
    for k in range(n):
        window = _patch_window(size, shifts[k])
        add_patch(field, (rows[k], cols[k]), strength * (vecs[k, 0] + 1j * vecs[k, 1]), window)
    return field


def degrade(truth, field, params, rng=None):
    """One observed frame: warp and blur (order per params), noise, clamp to [0, 1]."""
    sigma = params.gaussian_blur_sigma
    if params.blur_before_warp:
        out = warp(np.clip(gaussian_blur(truth, sigma), 0.0, 1.0), field)
    else:
        out = gaussian_blur(warp(truth, field), sigma)
    if params.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        out = out + rng.normal(0.0, params.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def simulate(truth, frame_count, severe_count, params=None):
    """Build a distorted sequence from `truth`.

    The first draws pick which frames are severe, then each frame draws its
    strength, field and noise in frame order, so a seed fixes the bundle.
    """
    params = params or TurbulenceParams()
    truth = check_image(truth, "truth")
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if not 0 <= severe_count <= frame_count:
        raise ValueError("severe_count must lie in [0, frame_count]")
    rng = np.random.default_rng(params.seed)
    h, w = truth.shape
    labels = np.zeros(frame_count, dtype=bool)
    labels[rng.permutation(frame_count)[:severe_count]] = True
    frames = np.empty((frame_count, h, w))
    fields = np.empty((frame_count, h, w), dtype=np.complex128)
    strengths = np.empty(frame_count)
    for t in range(frame_count):
        lo, hi = params.strength_range_severe if labels[t] else params.strength_range_mild
        strengths[t] = rng.uniform(lo, hi)
        fields[t] = make_field(w, h, params, strengths[t], rng)
        frames[t] = degrade(truth, fields[t], params, rng)
    return GroundTruthBundle(truth, frames, fields, labels, strengths)


def save_bundle(bundle, directory):
    """Write frames, ``truth.png``, ``fields/`` dumps and ``labels.csv``."""
    from .io import write_csv, write_flo, write_image, write_sequence

    directory = Path(directory)
    write_sequence(directory / "frames", bundle.frames, bits=16)
    write_image(directory / "truth.png", bundle.truth, bits=16)
    for t, f in enumerate(bundle.fields, start=1):
        write_flo(directory / "fields" / f"field_{t:04d}.flo", f)
    write_csv(directory / "labels.csv", ("frame", "severe", "strength"),
              [(t, int(s), f"{g:.6f}") for t, (s, g) in enumerate(zip(bundle.labels, bundle.strengths), 1)])
    return directory
