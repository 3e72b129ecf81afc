"""Beltrami coefficients and the linear Beltrami solver.

A planar map ``f(z) = z + field(z)`` with ``z = x + iy`` has Beltrami
coefficient ``mu = f_zbar / f_z``. Where ``|mu| < 1`` the map is locally
orientation preserving. Given ``mu`` and Dirichlet data on the frame border,
the coordinates ``u = Re f`` and ``v = Im f`` solve

    div(A grad u) = 0,   div(A grad v) = 0,

    A = 1 / (1 - |mu|^2) * [[(rho - 1)^2 + tau^2, -2 tau],
                            [-2 tau, (rho + 1)^2 + tau^2]],   mu = rho + i tau.

The operator is discretized with linear finite elements: every pixel cell is
split into two right triangles, ``mu`` on a triangle is the mean of its three
vertex values, and both systems share one symmetric positive definite matrix.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from ._validation import check_field
from .imagecore import jacobian_determinant, pixel_grid

DEFAULT_CLAMP_EPSILON = 0.01
DEGENERATE_FZ = 1e-12
SOLVER_RTOL = 1e-8

# basis gradients (d/dx, d/dy) of the three vertices on a unit right triangle;
# the second triangle of each cell has the negated gradients, which gives the
# same local stiffness matrix
_TRI_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class LbsConvergenceError(RuntimeError):
    """Raised when the solver misses its residual target after the iteration cap."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def beltrami_from_field(field):
    """Beltrami coefficient of ``p -> p + field(p)``.

    Parameters
    ----------
    field : complex ndarray of shape (H, W)

    Returns
    -------
    complex ndarray of shape (H, W)
        ``mu = f_zbar / f_z`` from central differences (one-sided on the
        border). Pixels with ``|f_z| < 1e-12`` get ``mu = 0``.
    """
    field = check_field(field)
    f = pixel_grid(field.shape) + field
    f_y, f_x = np.gradient(f)
    f_z = 0.5 * (f_x - 1j * f_y)
    f_zbar = 0.5 * (f_x + 1j * f_y)
    mu = np.zeros_like(f)
    ok = np.abs(f_z) >= DEGENERATE_FZ
    mu[ok] = f_zbar[ok] / f_z[ok]
    return mu


def clamp_beltrami(mu, epsilon=DEFAULT_CLAMP_EPSILON):
    """Pull ``|mu| >= 1`` back inside the unit disk, keeping its argument.

    Pixels with ``|mu| < 1`` are unchanged; others become ``mu / (|mu| + epsilon)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    mu = check_field(mu, "mu")
    mag = np.abs(mu)
    out = mu.copy()
    bad = mag >= 1.0
    out[bad] = mu[bad] / (mag[bad] + epsilon)
    return out


def lbs_coefficients(mu):
    """Entries ``(alpha1, alpha2, alpha3)`` of the symmetric matrix A(mu).

    Requires ``|mu| < 1`` everywhere; then A is positive definite.
    """
    mu = np.asarray(mu, dtype=np.complex128)
    mag2 = np.abs(mu) ** 2
    if np.any(mag2 >= 1.0):
        raise ValueError("lbs_coefficients needs sup|mu| < 1")
    rho, tau = mu.real, mu.imag
    den = 1.0 - mag2
    alpha1 = ((rho - 1.0) ** 2 + tau ** 2) / den
    alpha2 = -2.0 * tau / den
    alpha3 = ((rho + 1.0) ** 2 + tau ** 2) / den
    return alpha1, alpha2, alpha3


def _triangle_mu(mu):
    # mean of vertex values on the two triangles of each cell
    a = mu[:-1, :-1]
    b = mu[:-1, 1:]
    c = mu[1:, :-1]
    d = mu[1:, 1:]
    return (a + b + c) / 3.0, (d + c + b) / 3.0


def _cell_vertices(shape):
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    tri1 = np.stack([idx[:-1, :-1], idx[:-1, 1:], idx[1:, :-1]], axis=-1).reshape(-1, 3)
    tri2 = np.stack([idx[1:, 1:], idx[1:, :-1], idx[:-1, 1:]], axis=-1).reshape(-1, 3)
    return tri1, tri2


def assemble_stiffness(mu):
    """Global stiffness matrix of ``div(A(mu) grad .)`` on the pixel grid (CSR)."""
    mu = np.asarray(mu, dtype=np.complex128)
    h, w = mu.shape
    mu1, mu2 = _triangle_mu(mu)
    tri1, tri2 = _cell_vertices(mu.shape)
    tris = np.concatenate([tri1, tri2])
    a1, a2, a3 = lbs_coefficients(np.concatenate([mu1.ravel(), mu2.ravel()]))
    if not (np.all(a1 > 0) and np.all(a3 > 0) and np.all(a1 * a3 - a2 * a2 > 0)):
        raise ArithmeticError("coefficient matrix lost positive definiteness")
    g = _TRI_GRAD
    # local K_ij = area * g_i^T A g_j with area 1/2
    local = np.empty((len(tris), 3, 3))
    for i in range(3):
        for j in range(3):
            local[:, i, j] = 0.5 * (
                a1 * g[i, 0] * g[j, 0]
                + a2 * (g[i, 0] * g[j, 1] + g[i, 1] * g[j, 0])
                + a3 * g[i, 1] * g[j, 1]
            )
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    n = h * w
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _boundary_mask(shape):
    mask = np.zeros(shape, dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return mask


def lbs_solve(mu, boundary=None, rtol=SOLVER_RTOL, max_iter=None):
    """Recover the displacement field of the map with Beltrami coefficient `mu`.

    Parameters
    ----------
    mu : complex ndarray of shape (H, W)
        Must satisfy ``sup|mu| < 1``.
    boundary : complex ndarray of shape (H, W), optional
        Displacement prescribed on the frame border; only its border values
        are read. ``None`` pins the border to the identity.
    rtol : float
        Relative residual target for each coordinate solve.
    max_iter : int, optional
        Conjugate-gradient iteration cap, default ``10 * max(H, W)``.

    Returns
    -------
    complex ndarray of shape (H, W)
        Field ``f(p) - p``.

    Raises
    ------
    ValueError
        If ``sup|mu| >= 1`` or the grid is smaller than 3x3.
    LbsConvergenceError
        If neither conjugate gradients nor the direct fallback reach `rtol`.
    """
    mu = check_field(mu, "mu")
    h, w = mu.shape
    if min(h, w) < 3:
        raise ValueError("lbs_solve needs a grid of at least 3x3")
    if np.max(np.abs(mu)) >= 1.0:
        raise ValueError("lbs_solve needs sup|mu| < 1; clamp the coefficient first")
    z = pixel_grid(mu.shape)
    if boundary is None:
        target = z.copy()
    else:
        target = z + check_field(boundary, "boundary", shape=mu.shape)

    K = assemble_stiffness(mu)
    on_border = _boundary_mask(mu.shape).ravel()
    inner = ~on_border
    K_ii = K[inner][:, inner].tocsr()
    K_ib = K[inner][:, on_border]
    diag = K_ii.diagonal()
    precond = spla.LinearOperator(K_ii.shape, matvec=lambda r: r / diag, dtype=np.float64)
    cap = max_iter if max_iter is not None else 10 * max(h, w)

    result = target.ravel().copy()
    for part in (np.real, np.imag):
        tb = part(target).ravel()
        rhs = -K_ib @ tb[on_border]
        x0 = tb[inner]  # start from the boundary data's own interior (identity if unchanged)
        sol, _ = spla.cg(K_ii, rhs, x0=x0, rtol=rtol, atol=0.0, maxiter=cap, M=precond)
        res = _relative_residual(K_ii, sol, rhs)
        if res > rtol:
            # ill-conditioned near |mu| -> 1; a direct solve is the fallback
            sol = spla.spsolve(K_ii.tocsc(), rhs)
            res = _relative_residual(K_ii, sol, rhs)
            if not res <= max(rtol, 1e-10):
                raise LbsConvergenceError(
                    f"linear Beltrami solve stalled at relative residual {res:.3e}", res)
        if part is np.real:
            result.real[inner] = sol
        else:
            result.imag[inner] = sol
    return result.reshape(h, w) - z


def _relative_residual(A, x, b):
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return r / nb if nb > 0 else r


def triangle_determinants(field):
    """Jacobian determinant of ``p -> p + field(p)`` on each mesh triangle.

    Returns two arrays of shape (H-1, W-1), one per triangle of each cell. The
    piecewise-linear map is injective when all entries are positive.
    """
    f = pixel_grid(field.shape) + check_field(field)
    u, v = f.real, f.imag
    ux = u[:-1, 1:] - u[:-1, :-1]
    vx = v[:-1, 1:] - v[:-1, :-1]
    uy = u[1:, :-1] - u[:-1, :-1]
    vy = v[1:, :-1] - v[:-1, :-1]
    d1 = ux * vy - uy * vx
    ux = u[1:, 1:] - u[1:, :-1]
    vx = v[1:, 1:] - v[1:, :-1]
    uy = u[1:, 1:] - u[:-1, 1:]
    vy = v[1:, 1:] - v[:-1, 1:]
    d2 = ux * vy - uy * vx
    return d1, d2


def fold_mask(field):
    """Pixels touching a non-positive triangle or with a non-positive central Jacobian.

    Only the interior is inspected for the central-difference test.
    """
    d1, d2 = triangle_determinants(field)
    bad_cell = (d1 <= 0) | (d2 <= 0)
    mask = np.zeros(field.shape, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            mask[dy:dy + bad_cell.shape[0], dx:dx + bad_cell.shape[1]] |= bad_cell
    jac = jacobian_determinant(field)
    mask[1:-1, 1:-1] |= jac[1:-1, 1:-1] <= 0
    return mask


def fold_free_field(field, epsilon=DEFAULT_CLAMP_EPSILON, boundary="identity",
                    shrink=0.7, max_local_repairs=30, return_info=False):
    """Replace `field` by a fold-free map sharing its (clamped) Beltrami coefficient.

    Parameters
    ----------
    field : complex ndarray of shape (H, W)
    epsilon : float
        Clamp offset, see :func:`clamp_beltrami`.
    boundary : {"identity", "field"}
        Border pinned to the identity or taken from `field`.
    shrink : float
        Factor applied to ``mu`` around folded pixels on each repair round.
    max_local_repairs : int
        Local repair rounds before ``mu`` is shrunk globally.
    return_info : bool
        Also return a dict with the number of repair rounds.

    Notes
    -----
    With ``|mu|`` close to 1 the discrete solve can still fold where ``mu``
    varies sharply. Folded neighbourhoods get ``mu`` scaled by `shrink` and
    the map is solved again. If local rounds run out, ``mu`` is shrunk
    everywhere; at ``mu = 0`` the solver yields the discrete harmonic map,
    which is injective for a convex border.
    """
    field = check_field(field)
    if boundary not in ("identity", "field"):
        raise ValueError("boundary must be 'identity' or 'field'")
    if not 0 < shrink < 1:
        raise ValueError("shrink must lie in (0, 1)")
    bdata = field if boundary == "field" else None
    mu = clamp_beltrami(beltrami_from_field(field), epsilon)
    out = lbs_solve(mu, boundary=bdata)
    local = 0
    global_rounds = 0
    bad = fold_mask(out)
    while bad.any():
        if local < max_local_repairs:
            grow = ndimage.binary_dilation(bad, iterations=2)
            mu = np.where(grow, mu * shrink, mu)
            local += 1
        elif global_rounds < 40:
            mu = mu * shrink
            global_rounds += 1
        else:
            mu = np.zeros_like(mu)
        out = lbs_solve(mu, boundary=bdata)
        if not mu.any():
            break
        bad = fold_mask(out)
    if return_info:
        return out, {"local_repairs": local, "global_repairs": global_rounds}
    return out
