import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from turbi.imagecore import (
    PSNR_CAP,
    gaussian_blur,
    interior,
    invert_field,
    jacobian_determinant,
    laplacian,
    mean_magnitude,
    pixel_grid,
    psnr,
    sample_field,
    ssim,
    temporal_mean,
    to_gray,
    warp,
    warp_forward,
)
from turbi.scenes import smooth_scene

unit_images = arrays(np.float64, st.tuples(st.integers(8, 16), st.integers(8, 16)),
                     elements=st.floats(0, 1))


@given(unit_images)
def test_warp_zero_field_is_identity(img):
    out = warp(img, np.zeros(img.shape, complex))
    assert np.array_equal(out, img)


def test_warp_ramp_constant_shift():
    h, w = 6, 9
    ramp = np.tile(np.arange(w) / (w - 1), (h, 1))
    out = warp(ramp, np.full((h, w), 1.0 + 0j))
    # out[:, c] = ramp[:, c + 1] by index arithmetic
    assert np.allclose(out[:, :-1], ramp[:, 1:], atol=1e-15)
    assert np.allclose(out[:, -1], ramp[:, -1])


@given(st.floats(0, 1), st.complex_numbers(max_magnitude=50, allow_nan=False, allow_infinity=False))
def test_warp_single_pixel(value, shift):
    out = warp(np.array([[value]]), np.array([[shift]]))
    assert out[0, 0] == value


def test_warp_rejects_mismatched_field():
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), np.zeros((4, 5), complex))


def test_warp_forward_moves_content():
    img = smooth_scene(32, seed=3)
    shift = np.full(img.shape, 2.0 + 1.0j)
    moved = warp_forward(img, shift)
    # content at p lands at p + (2, 1)
    assert np.allclose(moved[5:-5, 5:-5], img[4:-6, 3:-7], atol=1e-12)


def test_invert_field_of_smooth_field():
    z = pixel_grid((24, 24))
    f = 0.8 * np.sin(z.real / 5) + 0.6j * np.cos(z.imag / 7)
    g = invert_field(f)
    # defining identity on the grid: q + g(q) is mapped back onto q
    q = z + g
    assert np.max(np.abs(q + sample_field(f, q.real, q.imag) - z)) < 1e-6


def test_laplacian_examples():
    assert np.array_equal(laplacian(np.full((5, 5), 0.3)), np.zeros((5, 5)))
    delta = np.zeros((3, 3))
    delta[1, 1] = 1
    expected = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float)
    assert np.array_equal(laplacian(delta), expected)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_laplacian_annihilates_affine(a, b, c):
    z = pixel_grid((9, 11))
    img = a + b * z.real / 10 + c * z.imag / 10
    assert np.max(np.abs(laplacian(img)[1:-1, 1:-1])) < 1e-12


def test_psnr_examples():
    a = smooth_scene(16, seed=0)
    assert psnr(a, a) == PSNR_CAP
    b = np.clip(a, 0, 1 - 10 / 255)
    assert psnr(b, b + 10 / 255) == pytest.approx(20 * np.log10(25.5), abs=1e-9)
    assert psnr(b, b + 10 / 255) == pytest.approx(28.1308, abs=1e-4)
    half = np.zeros((4, 4))
    half[:, :2] = 1
    assert psnr(half, 1 - half) == pytest.approx(0.0, abs=1e-12)


def test_ssim_examples(rng):
    a = smooth_scene(32, seed=1)
    assert ssim(a, a) == 1.0
    c1 = 0.01 ** 2
    lum = (2 * 0.5 * 0.7 + c1) / (0.25 + 0.49 + c1)
    assert ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.7)) == pytest.approx(lum, abs=1e-12)
    # closed form is 0.70 / 0.74 to within C1; the rounded 0.9461 quoted as a target is off by 1.5e-4
    assert lum == pytest.approx(0.945953, abs=1e-6)
    noisy = a + rng.normal(0, 0.005, a.shape)
    assert 0.9 < ssim(a, noisy) < 1


def test_metric_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


@given(unit_images, st.integers(0, 2 ** 31))
def test_metrics_symmetric(a, seed):
    b = np.random.default_rng(seed).uniform(0, 1, a.shape)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_blur_lowers_laplacian_energy():
    rng = np.random.default_rng(7)
    passes = 0
    for _ in range(100):
        img = rng.uniform(0, 1, (24, 24))
        sigma = rng.uniform(0.3, 3)
        passes += np.abs(laplacian(gaussian_blur(img, sigma))).sum() <= np.abs(laplacian(img)).sum()
    assert passes >= 99


def test_to_gray_rec601():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1
    assert np.allclose(to_gray(rgb), 0.299)
    with pytest.raises(ValueError):
        to_gray(np.zeros((2, 2, 2)))


def test_helpers():
    frames = np.stack([np.full((4, 4), v) for v in (0.1, 0.2, 0.6)])
    assert np.allclose(temporal_mean(frames), 0.3)
    assert np.allclose(temporal_mean(frames, [2, 0]), 0.35)
    f = np.full((10, 10), 3 + 4j)
    assert mean_magnitude(f) == pytest.approx(5)
    assert interior(np.zeros((10, 10)), 0.1).shape == (8, 8)
    z = pixel_grid((8, 8))
    assert np.allclose(jacobian_determinant(0.5 * z), 2.25)
