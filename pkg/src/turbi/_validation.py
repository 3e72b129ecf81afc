"""Input validation helpers shared by every stage."""

import numpy as np


def check_image(image, name="image", min_side=1):
    """Return `image` as a finite 2-D float64 array or raise ValueError."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if min(arr.shape) < min_side:
        raise ValueError(f"{name} must be at least {min_side}x{min_side}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_field(field, name="field", shape=None):
    """Return `field` as a finite complex128 grid (dx + i*dy)."""
    arr = np.asarray(field)
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.complex128)
    else:
        arr = arr.astype(np.complex128, copy=False)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D complex grid, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_sequence(frames, name="frames", min_frames=1, min_side=1):
    """Return `frames` as a (T, H, W) float64 array."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a (T, H, W) stack, got shape {arr.shape}")
    if arr.shape[0] < min_frames:
        raise ValueError(f"{name} needs at least {min_frames} frames, got {arr.shape[0]}")
    if min(arr.shape[1:]) < min_side:
        raise ValueError(f"{name} frames must be at least {min_side}x{min_side}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} shape {a.shape} does not match {names[1]} shape {b.shape}")
