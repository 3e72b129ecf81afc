"""Low-rank/sparse split of the registered stack and detail-layer fusion.

The registered frames are stacked as columns and split by robust PCA. The mean
of the low-rank columns is the structural image. Texture comes from the sparse
columns: pixels where the mean sparse magnitude stands out from its 7x7
neighbourhood are marked, the sharpest K x K sparse patch around each marked
pixel is enhanced by unsharp masking, weighted by a guided-filtered version of
its binary mask and merged by keeping, per pixel, the value of largest
magnitude.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_sequence
from .imagecore import laplacian
from .rpca import RpcaParams, rpca


@dataclass(frozen=True)
class FusionParams:
    """Detail extraction settings.

    ``thresh`` is compared on the sparse residual multiplied by
    ``intensity_scale`` (255 puts it in 8-bit grey levels).
    """

    window: int = 7
    thresh: float = 1.0
    patch_size: int = 7
    tau: float = 1.7
    beta: float = 0.5
    guided_radius: int | None = None
    guided_eps: float = 1e-4
    intensity_scale: float = 255.0
    rpca: RpcaParams = RpcaParams()

    def __post_init__(self):
        for name in ("window", "patch_size"):
            v = getattr(self, name)
            if v < 3 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.guided_eps < 0:
            raise ValueError("guided_eps must be >= 0")
        if self.guided_radius is not None and self.guided_radius < 0:
            raise ValueError("guided_radius must be >= 0")
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be > 0")

    @property
    def radius(self):
        return (self.patch_size - 1) // 2 if self.guided_radius is None else self.guided_radius


@dataclass
class PatchSet:
    """Patches of side K stored as (N, K, K) with a validity mask for border truncation."""

    centers: np.ndarray  # (N, 2) row, col
    frames: np.ndarray  # (N,) source frame
    patches: np.ndarray  # (N, K, K)
    valid: np.ndarray  # (N, K, K) bool


@dataclass
class DetailLayer:
    values: np.ndarray
    support: np.ndarray


def lowrank_split(registered, params=None):
    """Low-rank image and signed sparse frames of a registered stack.

    Returns
    -------
    low_rank_image : ndarray of shape (H, W)
        Row-wise mean of the low-rank columns.
    sparse_frames : ndarray of shape (T, H, W)
    """
    params = params or FusionParams()
    frames = check_sequence(registered, "registered", min_frames=2)
    t, h, w = frames.shape
    m = np.ascontiguousarray(frames.reshape(t, h * w).T)
    res = rpca(m, params.rpca)
    return res.low_rank.mean(axis=1).reshape(h, w), res.sparse.T.reshape(t, h, w).copy()


def adaptive_threshold(mean_sparse, params=None):
    """Mark pixels whose magnitude differs from the local mean magnitude by more than ``thresh``."""
    params = params or FusionParams()
    mag = np.abs(check_image(mean_sparse, "mean_sparse")) * params.intensity_scale
    local = ndimage.uniform_filter(mag, params.window, mode="nearest")
    return np.abs(mag - local) > params.thresh


def _box_mean(x, radius, mask):
    # mean over the window restricted to valid samples; windows are truncated at borders
    size = (1,) * (x.ndim - 2) + (2 * radius + 1, 2 * radius + 1)
    num = ndimage.uniform_filter(x * mask, size, mode="constant")
    den = ndimage.uniform_filter(mask.astype(np.float64), size, mode="constant")
    return np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)


def _guided(p, guide, radius, eps, mask):
    mean_i = _box_mean(guide, radius, mask)
    mean_p = _box_mean(p, radius, mask)
    cov_ip = _box_mean(guide * p, radius, mask) - mean_i * mean_p
    var_i = _box_mean(guide * guide, radius, mask) - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    out = _box_mean(a, radius, mask) * guide + _box_mean(b, radius, mask)
    return np.where(mask, out, 0.0)


def guided_filter(image, guide, radius, eps):
    """Edge-preserving smoothing of `image` steered by `guide` (local linear model).

    Window means are taken over the part of each (2r+1)^2 window inside the grid.
    """
    image = check_image(image, "image")
    guide = check_image(guide, "guide")
    if image.shape != guide.shape:
        raise ValueError("image and guide must have the same shape")
    if radius < 0 or eps < 0:
        raise ValueError("radius and eps must be >= 0")
    return _guided(image, guide, int(radius), float(eps), np.ones(image.shape, dtype=bool))


def guided_filter_batch(images, guides, radius, eps, valid):
    """:func:`guided_filter` over a (N, K, K) batch, ignoring samples outside `valid`."""
    return _guided(np.asarray(images, float), np.asarray(guides, float), int(radius), float(eps),
                   np.asarray(valid, dtype=bool))


def _extract(stack_or_image, centers, k, frame_idx=None):
    half = k // 2
    if frame_idx is None:
        src = stack_or_image[None]
        frame_idx = np.zeros(len(centers), dtype=np.intp)
    else:
        src = stack_or_image
    _, h, w = src.shape
    padded = np.pad(src, ((0, 0), (half, half), (half, half)))
    vmask = np.pad(np.ones((h, w), dtype=bool), half)
    dr, dc = np.mgrid[0:k, 0:k]
    rows = centers[:, 0, None, None] + dr
    cols = centers[:, 1, None, None] + dc
    patches = padded[frame_idx[:, None, None], rows, cols]
    return patches, vmask[rows, cols]


def patch_sharpness(sparse_frames, k):
    """Laplacian energy of every K x K footprint (truncated at borders), shape (T, H, W)."""
    frames = check_sequence(sparse_frames, "sparse_frames")
    energy = np.stack([laplacian(f) ** 2 for f in frames])
    return ndimage.uniform_filter(energy, (1, k, k), mode="constant") * (k * k)


def select_sharpest_patches(sparse_frames, mask, k):
    """For each marked pixel, the K x K patch from the frame with the largest Laplacian energy.

    Laplacians are taken on full frames and summed over the patch footprint;
    ties go to the lowest frame index. Border patches are truncated (their
    outside samples are zero and flagged invalid).
    """
    frames = check_sequence(sparse_frames, "sparse_frames")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frames.shape[1:]:
        raise ValueError("mask and frames differ in size")
    centers = np.argwhere(mask)
    if len(centers) == 0:
        empty = np.zeros((0, k, k))
        return PatchSet(np.zeros((0, 2), dtype=np.intp), np.zeros(0, dtype=np.intp), empty,
                        empty.astype(bool))
    score = patch_sharpness(frames, k)[:, centers[:, 0], centers[:, 1]]
    best = np.argmax(score, axis=0)  # first maximum wins
    patches, valid = _extract(frames, centers, k, best)
    return PatchSet(centers, best, patches * valid, valid)


def enhance_patch(patch, tau, radius, eps, valid=None):
    """Unsharp masking with a self-guided smoother: ``p + tau * (p - smooth(p))``."""
    patch = np.asarray(patch, dtype=np.float64)
    valid = np.ones(patch.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    smooth = _guided(patch, patch, radius, eps, valid)
    return np.where(valid, patch + tau * (patch - smooth), 0.0)


def weighted_patches(patch_set, mask, params=None):
    """Enhanced patches times their guided binary weights, shape (N, K, K)."""
    params = params or FusionParams()
    if len(patch_set.centers) == 0:
        return np.zeros((0, params.patch_size, params.patch_size))
    enhanced = enhance_patch(patch_set.patches, params.tau, params.radius, params.guided_eps,
                             patch_set.valid)
    binary, _ = _extract(np.asarray(mask, dtype=np.float64), patch_set.centers, params.patch_size)
    weights = guided_filter_batch(binary, patch_set.patches, params.radius, params.guided_eps,
                                  patch_set.valid)
    return weights * enhanced


def detail_layer(weighted, centers, shape, valid=None, rule="max"):
    """Merge placed patches into one signed grid.

    ``rule="max"`` keeps, per pixel, the covering value of largest magnitude
    (ties to the lower patch index). ``rule="sum"`` adds overlapping values,
    which can exceed every single patch; it is kept as a reference.
    """
    weighted = np.asarray(weighted, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 2)
    h, w = shape
    values = np.zeros(shape)
    support = np.zeros(shape, dtype=bool)
    if len(centers) == 0:
        return DetailLayer(values, support)
    k = weighted.shape[-1]
    half = k // 2
    if valid is None:
        valid = np.ones(weighted.shape, dtype=bool)
    best = np.full(shape, -1.0)
    for n in range(len(centers)):
        r, c = centers[n]
        r0, r1 = max(r - half, 0), min(r + half + 1, h)
        c0, c1 = max(c - half, 0), min(c + half + 1, w)
        pv = weighted[n, r0 - r + half:r1 - r + half, c0 - c + half:c1 - c + half]
        ok = valid[n, r0 - r + half:r1 - r + half, c0 - c + half:c1 - c + half]
        if rule == "sum":
            values[r0:r1, c0:c1] += np.where(ok, pv, 0.0)
        elif rule == "max":
            mag = np.where(ok, np.abs(pv), -1.0)
            take = mag > best[r0:r1, c0:c1]  # strict: earlier patch wins a tie
            values[r0:r1, c0:c1] = np.where(take, pv, values[r0:r1, c0:c1])
            best[r0:r1, c0:c1] = np.where(take, mag, best[r0:r1, c0:c1])
        else:
            raise ValueError("rule must be 'max' or 'sum'")
        support[r0:r1, c0:c1] |= ok
    return DetailLayer(values, support)


def extract_detail(sparse_frames, params=None, rule="max"):
    """Threshold, select, enhance, weight and merge; returns (DetailLayer, mask)."""
    params = params or FusionParams()
    frames = check_sequence(sparse_frames, "sparse_frames")
    mask = adaptive_threshold(frames.mean(axis=0), params)
    ps = select_sharpest_patches(frames, mask, params.patch_size)
    weighted = weighted_patches(ps, mask, params)
    return detail_layer(weighted, ps.centers, frames.shape[1:], ps.valid, rule=rule), mask


def fuse(deblurred, detail, beta):
    """``clip(deblurred + beta * detail, 0, 1)``."""
    deblurred = check_image(deblurred, "deblurred")
    values = detail.values if isinstance(detail, DetailLayer) else np.asarray(detail, float)
    if values.shape != deblurred.shape:
        raise ValueError("detail layer and image differ in size")
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    return np.clip(deblurred + beta * values, 0.0, 1.0)
