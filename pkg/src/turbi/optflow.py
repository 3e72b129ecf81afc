"""Coarse-to-fine variational optical flow.

Minimizes brightness constancy + gradient constancy + robust smoothness,

    E(w) = sum Psi(|I2(x+w) - I1(x)|^2)
         + gamma * sum Psi(|grad I2(x+w) - grad I1(x)|^2)
         + alpha * sum Psi(|grad u|^2 + |grad v|^2),    Psi(s^2) = sqrt(s^2 + 1e-6),

with nested fixed-point iterations (outer warping, inner lagged diffusivity)
and SOR for the linear systems. The returned field ``w`` satisfies
``to(x + w(x)) ~= from(x)``. Descriptor matching is not part of this solver.

Intensities are rescaled to [0, 255] internally so the conventional weights
(alpha=30, gamma=10) keep their usual meaning.
"""

from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy import ndimage

from ._validation import check_field, check_image, check_same_shape
from .imagecore import sample_bilinear

MIN_LEVEL_SIDE = 16


@dataclass(frozen=True)
class FlowParams:
    """Weights and iteration counts of the flow solver.

    ``levels=None`` picks the deepest pyramid whose coarsest side is at least 16.
    """

    alpha: float = 30.0
    gamma: float = 10.0
    pyramid_factor: float = 0.5
    levels: int | None = None
    fixed_point_iters: int = 5
    inner_iters: int = 5
    sor_iters: int = 30
    epsilon_psi: float = 1e-6
    omega: float = 1.9
    intensity_scale: float = 255.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.pyramid_factor < 1:
            raise ValueError("pyramid_factor must lie in (0, 1)")
        if self.levels is not None and self.levels < 1:
            raise ValueError("levels must be >= 1")
        if min(self.fixed_point_iters, self.inner_iters, self.sor_iters) < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.epsilon_psi > 0:
            raise ValueError("epsilon_psi must be > 0")
        if not 0 < self.omega < 2:
            raise ValueError("omega must lie in (0, 2)")


def psi(s2, eps=1e-6):
    return np.sqrt(s2 + eps)


def _dx(img):
    # central difference, replicate border
    p = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    return 0.5 * (p[:, 2:] - p[:, :-2])


def _dy(img):
    p = np.pad(img, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (p[2:, :] - p[:-2, :])


def _forward_grad(f):
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx, gy


def _resize(img, shape):
    """Bilinear resize with pixel-center alignment."""
    h, w = img.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sample_bilinear(img, xx, yy)


def pyramid_shapes(shape, params):
    """Shapes from finest to coarsest."""
    h, w = shape
    if params.levels is None:
        levels = 1
        while min(h, w) * params.pyramid_factor ** levels >= MIN_LEVEL_SIDE:
            levels += 1
    else:
        levels = params.levels
    shapes = []
    for k in range(levels):
        s = params.pyramid_factor ** k
        shapes.append((max(1, int(round(h * s))), max(1, int(round(w * s)))))
    if min(shapes[-1]) < MIN_LEVEL_SIDE // 2 or min(shapes[-1]) < 4:
        raise ValueError(f"image {shape} too small for a {levels}-level pyramid")
    return shapes


def _downsample(img, shape, factor):
    sigma = np.sqrt(max(1.0 / factor ** 2 - 1.0, 0.0)) / 2.0
    return _resize(ndimage.gaussian_filter(img, sigma, mode="nearest"), shape)


def _build_pyramid(img, shapes, params):
    pyr = [img]
    for shape in shapes[1:]:
        pyr.append(_downsample(pyr[-1], shape, params.pyramid_factor))
    return pyr


@njit(cache=True, nogil=True, fastmath=True)
def _solve_increment(ix, iy, iz, ixx, ixy, iyy, ixz, iyz, u, v,
                     alpha, gamma, eps2, n_inner, n_sor, omega):
    h, w = ix.shape
    # padded increments and padded current flow; border weights stay zero
    du = np.zeros((h + 2, w + 2))
    dv = np.zeros((h + 2, w + 2))
    up = np.zeros((h + 2, w + 2))
    vp = np.zeros((h + 2, w + 2))
    up[1:h + 1, 1:w + 1] = u
    vp[1:h + 1, 1:w + 1] = v
    we = np.zeros((h + 2, w + 2))
    ws = np.zeros((h + 2, w + 2))
    a12 = np.empty((h, w))
    r1 = np.empty((h, w))
    r2 = np.empty((h, w))
    inv1 = np.empty((h, w))
    inv2 = np.empty((h, w))
    ps = np.empty((h, w))
    for _ in range(n_inner):
        # smoothness diffusivity at U = u + du (forward differences)
        for y in range(h):
            for x in range(w):
                ux = 0.0
                vx = 0.0
                uy = 0.0
                vy = 0.0
                if x < w - 1:
                    ux = up[y + 1, x + 2] + du[y + 1, x + 2] - up[y + 1, x + 1] - du[y + 1, x + 1]
                    vx = vp[y + 1, x + 2] + dv[y + 1, x + 2] - vp[y + 1, x + 1] - dv[y + 1, x + 1]
                if y < h - 1:
                    uy = up[y + 2, x + 1] + du[y + 2, x + 1] - up[y + 1, x + 1] - du[y + 1, x + 1]
                    vy = vp[y + 2, x + 1] + dv[y + 2, x + 1] - vp[y + 1, x + 1] - dv[y + 1, x + 1]
                ps[y, x] = alpha * 0.5 / np.sqrt(ux * ux + uy * uy + vx * vx + vy * vy + eps2)
        for y in range(h):
            for x in range(w - 1):
                we[y + 1, x + 1] = 0.5 * (ps[y, x] + ps[y, x + 1])
        for y in range(h - 1):
            for x in range(w):
                ws[y + 1, x + 1] = 0.5 * (ps[y, x] + ps[y + 1, x])
        # data diffusivities; the fixed part of the smoothness term moves to the rhs
        for y in range(h):
            py = y + 1
            for x in range(w):
                px = x + 1
                ddu = du[py, px]
                ddv = dv[py, px]
                r = iz[y, x] + ix[y, x] * ddu + iy[y, x] * ddv
                pd = 0.5 / np.sqrt(r * r + eps2)
                gx = ixz[y, x] + ixx[y, x] * ddu + ixy[y, x] * ddv
                gy = iyz[y, x] + ixy[y, x] * ddu + iyy[y, x] * ddv
                pg = gamma * 0.5 / np.sqrt(gx * gx + gy * gy + eps2)
                cw = we[py, px - 1]
                ce = we[py, px]
                cn = ws[py - 1, px]
                cs = ws[py, px]
                sw = cw + ce + cn + cs
                a11 = pd * ix[y, x] * ix[y, x] + pg * (ixx[y, x] * ixx[y, x] + ixy[y, x] * ixy[y, x])
                a22 = pd * iy[y, x] * iy[y, x] + pg * (ixy[y, x] * ixy[y, x] + iyy[y, x] * iyy[y, x])
                a12[y, x] = pd * ix[y, x] * iy[y, x] + pg * (ixx[y, x] * ixy[y, x] + ixy[y, x] * iyy[y, x])
                su = (cw * up[py, px - 1] + ce * up[py, px + 1]
                      + cn * up[py - 1, px] + cs * up[py + 1, px] - sw * up[py, px])
                sv = (cw * vp[py, px - 1] + ce * vp[py, px + 1]
                      + cn * vp[py - 1, px] + cs * vp[py + 1, px] - sw * vp[py, px])
                r1[y, x] = su - (pd * ix[y, x] * iz[y, x] + pg * (ixx[y, x] * ixz[y, x] + ixy[y, x] * iyz[y, x]))
                r2[y, x] = sv - (pd * iy[y, x] * iz[y, x] + pg * (ixy[y, x] * ixz[y, x] + iyy[y, x] * iyz[y, x]))
                d1 = a11 + sw
                d2 = a22 + sw
                inv1[y, x] = 1.0 / d1 if d1 > 0.0 else 0.0
                inv2[y, x] = 1.0 / d2 if d2 > 0.0 else 0.0
        for _s in range(n_sor):
            for y in range(h):
                py = y + 1
                for x in range(w):
                    px = x + 1
                    cw = we[py, px - 1]
                    ce = we[py, px]
                    cn = ws[py - 1, px]
                    cs = ws[py, px]
                    i1 = inv1[y, x]
                    i2 = inv2[y, x]
                    cu = du[py, px]
                    cv = dv[py, px]
                    if i1 > 0.0:
                        nu = (r1[y, x] - a12[y, x] * cv + cw * du[py, px - 1] + ce * du[py, px + 1]
                              + cn * du[py - 1, px] + cs * du[py + 1, px]) * i1
                        cu = cu + omega * (nu - cu)
                        du[py, px] = cu
                    if i2 > 0.0:
                        nv = (r2[y, x] - a12[y, x] * cu + cw * dv[py, px - 1] + ce * dv[py, px + 1]
                              + cn * dv[py - 1, px] + cs * dv[py + 1, px]) * i2
                        dv[py, px] = cv + omega * (nv - cv)
    return du[1:h + 1, 1:w + 1].copy(), dv[1:h + 1, 1:w + 1].copy()


def _warped_terms(i1, i2, u, v):
    """Linearization terms at the current flow (u, v)."""
    h, w = i1.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xx + u
    ys = yy + v
    i2w = sample_bilinear(i2, xs, ys)
    g1x, g1y = _dx(i1), _dy(i1)
    g2x = sample_bilinear(_dx(i2), xs, ys)
    g2y = sample_bilinear(_dy(i2), xs, ys)
    ix = 0.5 * (g1x + g2x)
    iy = 0.5 * (g1y + g2y)
    iz = i2w - i1
    ixx = 0.5 * (_dx(g1x) + _dx(g2x))
    ixy = 0.25 * (_dy(g1x) + _dy(g2x) + _dx(g1y) + _dx(g2y))
    iyy = 0.5 * (_dy(g1y) + _dy(g2y))
    ixz = g2x - g1x
    iyz = g2y - g1y
    return ix, iy, iz, ixx, ixy, iyy, ixz, iyz


def flow(from_image, to_image, params=None):
    """Dense displacement field ``w`` with ``to(x + w(x)) ~= from(x)``.

    Parameters
    ----------
    from_image, to_image : ndarray of shape (H, W)
        Frames with intensities in [0, 1]; the smaller side must be >= 16.
    params : FlowParams, optional

    Returns
    -------
    complex ndarray of shape (H, W)
        ``u + 1j*v`` in pixels.
    """
    params = params or FlowParams()
    i1 = check_image(from_image, "from_image", min_side=MIN_LEVEL_SIDE)
    i2 = check_image(to_image, "to_image", min_side=MIN_LEVEL_SIDE)
    check_same_shape(i1, i2, ("from_image", "to_image"))
    shapes = pyramid_shapes(i1.shape, params)
    s = params.intensity_scale
    pyr1 = _build_pyramid(i1 * s, shapes, params)
    pyr2 = _build_pyramid(i2 * s, shapes, params)

    u = np.zeros(shapes[-1])
    v = np.zeros(shapes[-1])
    for level in range(len(shapes) - 1, -1, -1):
        shape = shapes[level]
        if u.shape != shape:
            sy = shape[0] / u.shape[0]
            sx = shape[1] / u.shape[1]
            u = _resize(u, shape) * sx
            v = _resize(v, shape) * sy
        a, b = pyr1[level], pyr2[level]
        for _ in range(params.fixed_point_iters):
            terms = _warped_terms(a, b, u, v)
            du, dv = _solve_increment(*terms, u, v, float(params.alpha), float(params.gamma),
                                      float(params.epsilon_psi), int(params.inner_iters),
                                      int(params.sor_iters), float(params.omega))
            u = u + du
            v = v + dv
    return u + 1j * v


def flow_energy(from_image, to_image, field, params=None):
    """Evaluate the three implemented energy terms at `field`.

    Returns a dict with ``brightness``, ``gradient`` (already weighted by
    gamma), ``smoothness`` (weighted by alpha) and ``total``.
    """
    params = params or FlowParams()
    i1 = check_image(from_image, "from_image")
    i2 = check_image(to_image, "to_image")
    check_same_shape(i1, i2, ("from_image", "to_image"))
    field = check_field(field, shape=i1.shape)
    s = params.intensity_scale
    eps = params.epsilon_psi
    u, v = field.real, field.imag
    h, w = i1.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs, ys = xx + u, yy + v
    a, b = i1 * s, i2 * s
    i2w = sample_bilinear(b, xs, ys)
    g2x = sample_bilinear(_dx(b), xs, ys)
    g2y = sample_bilinear(_dy(b), xs, ys)
    brightness = float(np.sum(psi((i2w - a) ** 2, eps)))
    gradient = params.gamma * float(np.sum(psi((g2x - _dx(a)) ** 2 + (g2y - _dy(a)) ** 2, eps)))
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    smoothness = params.alpha * float(np.sum(psi(ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2, eps)))
    return {
        "brightness": brightness,
        "gradient": gradient,
        "smoothness": smoothness,
        "total": brightness + gradient + smoothness,
    }


def with_levels(params, levels):
    return replace(params, levels=levels)
