"""Image grids, displacement fields, warping, differential operators and quality metrics.

Conventions used throughout the package:

* an image is a 2-D float64 array indexed ``[row, col]`` with intensities in [0, 1];
* a displacement field is a complex128 grid ``dx + 1j * dy`` where ``dx`` runs
  along columns (x) and ``dy`` along rows (y);
* ``warp(image, field)`` samples backwards: ``out(p) = image(p + field(p))``.
"""

import numpy as np
from scipy import ndimage

from ._validation import check_field, check_image, check_same_shape

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def to_gray(image):
    """Convert an RGB(A) array to Rec.601 luma; 2-D input is returned as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    raise ValueError(f"cannot convert array of shape {arr.shape} to grayscale")


def pixel_grid(shape):
    """Complex grid ``x + 1j*y`` of pixel coordinates for an image of `shape`."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return x + 1j * y


def sample_bilinear(image, xs, ys):
    """Bilinear sample of `image` at float coordinates, clamped to the domain.

    No intensity clamping is applied, so this also works on signed grids.
    """
    h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def warp(image, field):
    """Backward-warp `image` by `field` with bilinear interpolation.

    Parameters
    ----------
    image : ndarray of shape (H, W)
        Intensities in [0, 1].
    field : complex ndarray of shape (H, W)
        Displacement ``dx + 1j*dy``; the output at ``p`` is the image sampled
        at ``p + field(p)``. Coordinates outside the domain are clamped.

    Returns
    -------
    ndarray of shape (H, W)
        Warped image, clamped to [0, 1].
    """
    image = check_image(image)
    field = check_field(field, shape=image.shape)
    h, w = image.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    out = sample_bilinear(image, x + field.real, y + field.imag)
    return np.clip(out, 0.0, 1.0)


def sample_field(field, xs, ys):
    """Bilinear sample of a complex field at float coordinates."""
    return sample_bilinear(field.real, xs, ys) + 1j * sample_bilinear(field.imag, xs, ys)


def invert_field(field, n_iter=30, tol=1e-6):
    """Approximate inverse of the map ``p -> p + field(p)``.

    Returns ``g`` with ``q + g(q) = p`` whenever ``q = p + field(p)``, found by
    the fixed-point iteration ``g(q) = -field(q + g(q))``. Converges when the
    field's Jacobian has norm below one, which holds for the smooth, small
    deformations produced by turbulence.
    """
    field = check_field(field)
    h, w = field.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    g = -field.copy()
    for _ in range(n_iter):
        g_new = -sample_field(field, x + g.real, y + g.imag)
        delta = np.max(np.abs(g_new - g)) if g.size else 0.0
        g = g_new
        if delta < tol:
            break
    return g


def warp_forward(image, field):
    """Resample `image` so that content at ``p`` moves to ``p + field(p)``."""
    return warp(image, invert_field(field))


def laplacian(image):
    """5-point Laplacian with replicate padding; signed, not clamped."""
    image = check_image(image)
    return ndimage.convolve(image, LAPLACIAN_KERNEL, mode="nearest")


def gaussian_blur(image, sigma):
    """Gaussian blur with replicate borders; ``sigma <= 0`` returns a copy."""
    image = check_image(image)
    if sigma <= 0:
        return image.copy()
    return ndimage.gaussian_filter(image, sigma, mode="nearest")


def temporal_mean(frames, indices=None):
    """Arithmetic mean over frames (optionally a sorted index subset)."""
    frames = np.asarray(frames, dtype=np.float64)
    if indices is not None:
        frames = frames[np.sort(np.asarray(indices, dtype=np.intp))]
    return frames.mean(axis=0)


def mean_magnitude(field, margin=0.0):
    """Mean |field| over the grid, optionally ignoring a border fraction."""
    field = np.asarray(field)
    if margin > 0:
        field = interior(field, margin)
    return float(np.mean(np.abs(field)))


def interior(grid, fraction=0.1):
    """Crop `fraction` of each side (e.g. 0.1 keeps the central 80%)."""
    h, w = grid.shape[-2:]
    my = int(round(h * fraction))
    mx = int(round(w * fraction))
    return grid[..., my:h - my, mx:w - mx]


def psnr(a, b):
    """Peak signal-to-noise ratio on the [0, 1] scale, capped at 99 dB."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _window_means(x, size):
    # mean over every fully contained size x size window
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    s = c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]
    return s / float(size * size)


def ssim(a, b):
    """Mean structural similarity over all 8x8 windows (C1=0.01^2, C2=0.03^2)."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mu_a = _window_means(a, SSIM_WINDOW)
    mu_b = _window_means(b, SSIM_WINDOW)
    var_a = _window_means(a * a, SSIM_WINDOW) - mu_a * mu_a
    var_b = _window_means(b * b, SSIM_WINDOW) - mu_b * mu_b
    cov = _window_means(a * b, SSIM_WINDOW) - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def jacobian_determinant(field):
    """Determinant of the Jacobian of ``p -> p + field(p)`` by central differences.

    Border rows/columns use one-sided differences; callers scanning for folds
    usually look at the interior only.
    """
    field = check_field(field)
    dx_dy, dx_dx = np.gradient(field.real)
    dy_dy, dy_dx = np.gradient(field.imag)
    return (1.0 + dx_dx) * (1.0 + dy_dy) - dx_dy * dy_dx
