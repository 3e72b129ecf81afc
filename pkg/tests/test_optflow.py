import numpy as np
import pytest

from turbi.imagecore import interior, pixel_grid, warp
from turbi.optflow import FlowParams, _downsample, _resize, flow, flow_energy, pyramid_shapes, with_levels
from turbi.scenes import smooth_scene

# ground-truth fields are analytic, so these are oracle comparisons
TRANSLATION_EPE = 0.25
ROTATION_EPE = 0.3


@pytest.fixture(scope="module")
def scene():
    return smooth_scene(64, seed=5)


def translated(img, shift):
    # to(x + shift) = img(x)
    return warp(img, np.full(img.shape, -shift))


def rotation_pair(img, degrees):
    h, w = img.shape
    z = pixel_grid(img.shape)
    c = (w - 1) / 2 + 1j * (h - 1) / 2
    rot = np.exp(1j * np.deg2rad(degrees))
    to = warp(img, (z - c) / rot + c - z)
    return to, (z - c) * rot + c - z


def test_identical_frames_give_near_zero_flow(scene):
    assert np.mean(np.abs(flow(scene, scene))) < 0.05


def test_integer_translation(scene):
    f = flow(scene, translated(scene, 2 + 1j))
    assert np.mean(np.abs(interior(f - (2 + 1j), 0.1))) < TRANSLATION_EPE


def test_small_rotation(scene):
    to, truth = rotation_pair(scene, 0.5)
    f = flow(scene, to)
    assert np.mean(np.abs(interior(f - truth, 0.1))) < ROTATION_EPE


def test_energy_of_solution_not_above_zero_field(rng):
    for seed in range(3):
        a = smooth_scene(32, seed=seed)
        b = translated(a, complex(*rng.uniform(-1.5, 1.5, 2)))
        f = flow(a, b)
        assert flow_energy(a, b, f)["total"] <= flow_energy(a, b, np.zeros_like(f))["total"]


def test_energy_examples(scene):
    p = FlowParams()
    zero = np.zeros(scene.shape, complex)
    e = flow_energy(scene, scene, zero, p)
    area = scene.size
    psi0 = np.sqrt(p.epsilon_psi)
    assert e["brightness"] == pytest.approx(psi0 * area)
    assert e["gradient"] == pytest.approx(p.gamma * psi0 * area)
    # the robust penalty is sqrt(s^2 + eps), so a flat field still costs alpha * psi(0) per pixel
    assert e["smoothness"] == pytest.approx(p.alpha * psi0 * area)
    to = translated(scene, 2 + 1j)
    assert flow_energy(scene, to, np.full(scene.shape, 2 + 1j))["total"] < flow_energy(scene, to, zero)["total"]
    f = 0.3 * np.sin(pixel_grid(scene.shape) / 9)
    e1 = flow_energy(scene, to, f, p)["smoothness"]
    e2 = flow_energy(scene, to, f, FlowParams(alpha=2 * p.alpha))["smoothness"]
    assert e2 == pytest.approx(2 * e1, rel=1e-12)


def test_pyramid_consistency_statistical():
    # half-resolution solve, upsampled, against the full solve; single pairs can
    # exceed the 25% band, so the check is on the median over a pair suite
    rng = np.random.default_rng(0)
    ratios = []
    for seed in range(8):
        img = smooth_scene(64, seed=seed)
        z = pixel_grid(img.shape)
        fld = complex(*rng.uniform(-2, 2, 2)) + 0.7 * np.sin(
            z.real / rng.uniform(8, 15) + 1j * z.imag / rng.uniform(8, 15))
        to = warp(img, -fld)
        full = flow(img, to)
        half = (32, 32)
        coarse = flow(_downsample(img, half, 0.5), _downsample(to, half, 0.5))
        up = 2 * (_resize(coarse.real, img.shape) + 1j * _resize(coarse.imag, img.shape))
        ratios.append(flow_energy(img, to, up)["total"] / flow_energy(img, to, full)["total"])
    assert np.median(ratios) <= 1.25
    assert np.mean(np.array(ratios) <= 1.25) >= 0.75


def test_pyramid_shapes():
    shapes = pyramid_shapes((128, 96), FlowParams())
    assert shapes[0] == (128, 96)
    assert min(shapes[-1]) >= 16
    assert len(pyramid_shapes((128, 96), with_levels(FlowParams(), 1))) == 1


def test_flow_errors():
    with pytest.raises(ValueError):
        flow(np.zeros((16, 16)), np.zeros((16, 20)))
    with pytest.raises(ValueError):
        flow(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        FlowParams(alpha=0)
    with pytest.raises(ValueError):
        FlowParams(pyramid_factor=1.0)
