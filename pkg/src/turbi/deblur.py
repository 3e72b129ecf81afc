"""Blind deconvolution with a piecewise gradient prior and a simplex kernel.

The model is ``g = h * F`` with periodic convolution on the mirror-extended
image. The objective is

    J(F, h) = ||g - h * F||^2 + lambda1 * sum(phi(F_x) + phi(F_y)) + lambda2 * ||h||_1,

where ``phi(x) = psi(s * x) / s`` rescales the gradient penalty

    psi(x) = theta1 * |x|               for |x| <= l_t,
    psi(x) = theta2 * x^2 + theta3      otherwise

from 8-bit gradient units (``s = 255``) to the [0, 1] intensity scale. The
prior on the gradient value is ``-psi``; ``theta3`` is fixed by continuity at
``l_t``. With ``h`` on the probability simplex the L1 kernel term is constant.

An initial kernel is estimated on image gradients with an L0-regularized
latent image. The objective is then lowered by alternating an F-step
(half-quadratic splitting with an exact per-pixel gradient update) and an
h-step (projected gradient on the kernel's normal equations). Each half-step
is accepted only if it does not raise ``J``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from ._validation import check_image

log = logging.getLogger(__name__)

THETA1 = 2.7
THETA2 = 6.1e-4
L_T = 1.8526


@dataclass(frozen=True)
class DeblurParams:
    """Deconvolution settings.

    ``init="estimate"`` runs the gradient-domain kernel estimation first,
    ``"delta"`` starts from the identity kernel. ``noise_level`` (in [0, 1]
    intensity units) scales the regularization of that estimation stage.
    """

    kernel_size: int = 5
    noise_level: float = 0.02
    lambda1: float = 0.02
    lambda2: float = 1e-3
    theta1: float = THETA1
    theta2: float = THETA2
    l_t: float = L_T
    theta3: float | None = None
    outer_iters: int = 5
    intensity_scale: float = 255.0
    init: str = "estimate"
    estimate_iters: int = 15
    hqs_beta0: float = 1e-3
    hqs_beta_max: float = 1e5
    hqs_rate: float = 2.0
    kernel_steps: int = 300
    divergence_tol: float = 1e-6

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be > 0")
        if not (self.theta1 > 0 and self.theta2 >= 0 and self.l_t > 0):
            raise ValueError("theta1, l_t must be > 0 and theta2 >= 0")
        if self.theta3 is not None:
            knee = self.theta1 * self.l_t - (self.theta2 * self.l_t ** 2 + self.theta3)
            if abs(knee) > 1e-9:
                raise ValueError("prior constants must be continuous at l_t")
        if self.outer_iters < 1 or self.estimate_iters < 0:
            raise ValueError("iteration counts must be positive")
        if self.init not in ("estimate", "delta"):
            raise ValueError("init must be 'estimate' or 'delta'")
        if not self.noise_level >= 0:
            raise ValueError("noise_level must be >= 0")
        if not self.hqs_rate > 1:
            raise ValueError("hqs_rate must be > 1")

    @property
    def knee_offset(self):
        if self.theta3 is not None:
            return self.theta3
        return self.theta1 * self.l_t - self.theta2 * self.l_t ** 2


@dataclass
class DeblurResult:
    image: np.ndarray
    kernel: np.ndarray
    objective: list  # J after every outer iteration, starting with the initial pair
    diverged: bool


def rho_prior(x, params=None):
    """Log-prior of a gradient value in 8-bit units: ``-psi(x)``."""
    params = params or DeblurParams()
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    return np.where(a <= params.l_t, -params.theta1 * a,
                    -(params.theta2 * x * x + params.knee_offset))


def gradient_penalty(x, params):
    """``phi(x) = psi(s * x) / s`` on the [0, 1] intensity scale."""
    s = params.intensity_scale
    return -rho_prior(np.asarray(x) * s, params) / s


def _psf2otf(kernel, shape):
    k = kernel.shape[0]
    pad = np.zeros(shape)
    pad[:k, :k] = kernel
    pad = np.roll(pad, (-(k // 2), -(k // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


def _grad_otfs(shape):
    dx = np.zeros(shape)
    dx[0, 0], dx[0, -1] = -1.0, 1.0  # forward difference F(x+1) - F(x) as correlation
    dy = np.zeros(shape)
    dy[0, 0], dy[-1, 0] = -1.0, 1.0
    return np.fft.fft2(dx), np.fft.fft2(dy)


def _grads(f):
    return np.roll(f, -1, axis=1) - f, np.roll(f, -1, axis=0) - f


def _conv(f, kernel):
    return np.real(np.fft.ifft2(np.fft.fft2(f) * _psf2otf(kernel, f.shape)))


def mirror_extend(image):
    """Symmetric extension to twice the size, so periodic convolution has no seams."""
    top = np.concatenate([image, image[:, ::-1]], axis=1)
    return np.concatenate([top, top[::-1]], axis=0)


def objective(g, f, kernel, params):
    """``J(F, h)`` on the (already extended) periodic domain."""
    r = g - _conv(f, kernel)
    fx, fy = _grads(f)
    prior = gradient_penalty(fx, params).sum() + gradient_penalty(fy, params).sum()
    return float(np.sum(r * r) + params.lambda1 * prior + params.lambda2 * np.abs(kernel).sum())


def _shrink_gradient(d, beta, params):
    """Exact minimizer of ``beta (v - d)^2 + lambda1 * phi(v)`` per entry."""
    s = params.intensity_scale
    lam = params.lambda1
    t = params.l_t / s
    # |v| <= t: soft threshold clipped to the interval
    v_a = np.sign(d) * np.maximum(np.abs(d) - lam * params.theta1 / (2.0 * beta), 0.0)
    v_a = np.clip(v_a, -t, t)
    # |v| >= t: quadratic, pushed out to the knee if needed
    v_b = beta * d / (beta + lam * params.theta2 * s)
    v_b = np.sign(d) * np.maximum(np.abs(v_b), t)
    cost_a = beta * (v_a - d) ** 2 + lam * gradient_penalty(v_a, params)
    cost_b = beta * (v_b - d) ** 2 + lam * gradient_penalty(v_b, params)
    return np.where(cost_a <= cost_b, v_a, v_b)


def f_step(g, f0, kernel, params):
    """Half-quadratic splitting for the latent image with `kernel` fixed.

    Returns the better (lower ``J``) of `f0` and the splitting result.
    """
    H = _psf2otf(kernel, g.shape)
    Dx, Dy = _grad_otfs(g.shape)
    G = np.fft.fft2(g)
    num_data = np.conj(H) * G
    den_data = np.abs(H) ** 2
    den_grad = np.abs(Dx) ** 2 + np.abs(Dy) ** 2
    f = f0.copy()
    beta = params.hqs_beta0
    while beta <= params.hqs_beta_max:
        fx, fy = _grads(f)
        vx = _shrink_gradient(fx, beta, params)
        vy = _shrink_gradient(fy, beta, params)
        num = num_data + beta * (np.conj(Dx) * np.fft.fft2(vx) + np.conj(Dy) * np.fft.fft2(vy))
        f = np.real(np.fft.ifft2(num / (den_data + beta * den_grad + 1e-12)))
        beta *= params.hqs_rate
    if objective(g, f, kernel, params) <= objective(g, f0, kernel, params):
        return f
    return f0


def project_simplex(v):
    """Euclidean projection of a flat vector onto ``{x >= 0, sum x = 1}``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    cond = u - css / ind > 0
    r = ind[cond][-1]
    theta = css[cond][-1] / r
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


def kernel_normal_equations(g, f, k):
    """``A, b`` with ``||g - h * f||^2 = h'Ah - 2b'h + g'g`` for a flat k x k kernel."""
    F = np.fft.fft2(f)
    auto = np.real(np.fft.ifft2(np.conj(F) * F))
    cross = np.real(np.fft.ifft2(np.conj(F) * np.fft.fft2(g)))
    r = k // 2
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    b = np.array([cross[dy % g.shape[0], dx % g.shape[1]] for dy, dx in offs])
    A = np.empty((k * k, k * k))
    for i, (ay, ax) in enumerate(offs):
        for j, (by, bx) in enumerate(offs):
            A[i, j] = auto[(ay - by) % g.shape[0], (ax - bx) % g.shape[1]]
    return A, b


def h_step(g, f, kernel0, params):
    """Projected gradient on the kernel QP over the simplex; never raises ``J``."""
    k = kernel0.shape[0]
    A, b = kernel_normal_equations(g, f, k)
    lip = 2.0 * np.linalg.eigvalsh(A)[-1]
    if not lip > 0:
        return kernel0
    h = kernel0.ravel().copy()
    q = lambda x: x @ A @ x - 2.0 * b @ x
    best, best_q = h.copy(), q(h)
    # accelerated projected gradient, tracking the best iterate
    y, t = h.copy(), 1.0
    for _ in range(params.kernel_steps):
        h_new = project_simplex(y - (2.0 * (A @ y) - 2.0 * b) / lip)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = h_new + ((t - 1.0) / t_new) * (h_new - h)
        h, t = h_new, t_new
        qh = q(h)
        if qh < best_q:
            best, best_q = h.copy(), qh
    cand = best.reshape(k, k)
    if objective(g, f, cand, params) <= objective(g, f, kernel0, params):
        return cand
    return kernel0


def delta_kernel(k):
    h = np.zeros((k, k))
    h[k // 2, k // 2] = 1.0
    return h


def _l0_latent(g, kernel, lam, beta_max=1e5):
    # L0-gradient latent image by half-quadratic splitting
    H = _psf2otf(kernel, g.shape)
    Dx, Dy = _grad_otfs(g.shape)
    G = np.fft.fft2(g)
    num_data = np.conj(H) * G
    den = np.abs(H) ** 2
    den_grad = np.abs(Dx) ** 2 + np.abs(Dy) ** 2
    f = g.copy()
    beta = 2.0 * lam
    while beta < beta_max:
        fx, fy = _grads(f)
        keep = fx * fx + fy * fy >= lam / beta
        vx, vy = fx * keep, fy * keep
        num = num_data + beta * (np.conj(Dx) * np.fft.fft2(vx) + np.conj(Dy) * np.fft.fft2(vy))
        f = np.real(np.fft.ifft2(num / (den + beta * den_grad)))
        beta *= 2.0
    return f


def _kernel_from_gradients(g, latent, k, gamma):
    Dx, Dy = _grad_otfs(g.shape)
    G = np.fft.fft2(g)
    L = np.fft.fft2(latent)
    num = np.conj(Dx * L) * (Dx * G) + np.conj(Dy * L) * (Dy * G)
    den = np.abs(Dx * L) ** 2 + np.abs(Dy * L) ** 2 + gamma
    full = np.real(np.fft.ifft2(num / den))
    r = k // 2
    h = np.roll(full, (r, r), axis=(0, 1))[:k, :k]
    h = np.maximum(h, 0.0)
    if h.max() > 0:
        h[h < 0.05 * h.max()] = 0.0
    if h.sum() <= 0:
        return delta_kernel(k)
    return h / h.sum()


def estimate_kernel(g, params):
    """Initial kernel from an L0-sharpened latent image and gradient matching."""
    k = params.kernel_size
    h = delta_kernel(k)
    lam = 4e-3
    gamma = max(params.noise_level, 1e-3) ** 2 * g.size
    for _ in range(params.estimate_iters):
        latent = _l0_latent(g, h, lam)
        h = _kernel_from_gradients(g, latent, k, gamma)
        lam = max(lam * 0.85, 1e-4)
    return h


def blind_deconvolve(image, params=None, kernel0=None):
    """Jointly estimate a sharp image and a blur kernel.

    Parameters
    ----------
    image : ndarray of shape (H, W)
        Blurred observation in [0, 1].
    params : DeblurParams, optional
    kernel0 : ndarray of shape (k, k), optional
        Starting kernel; overrides ``params.init``.

    Returns
    -------
    DeblurResult
        ``image`` is clipped to [0, 1]; ``kernel`` is nonnegative with unit sum;
        ``objective`` is non-increasing (within ``divergence_tol``) unless
        ``diverged`` is set, in which case the best pair so far is returned.
    """
    params = params or DeblurParams()
    g0 = check_image(image, "image")
    k = params.kernel_size
    if min(g0.shape) < k:
        raise ValueError("image is smaller than the kernel")
    g = mirror_extend(g0)
    if kernel0 is not None:
        h = project_simplex(np.asarray(kernel0, float)).reshape(k, k)
    elif params.init == "estimate":
        h = estimate_kernel(g, params)
    else:
        h = delta_kernel(k)
    f = g.copy()
    history = [objective(g, f, h, params)]
    best = (history[0], f, h)
    diverged = False
    for _ in range(params.outer_iters):
        f = f_step(g, f, h, params)
        h = h_step(g, f, h, params)
        j = objective(g, f, h, params)
        if j > history[-1] + params.divergence_tol * max(abs(history[-1]), 1.0):
            log.warning("deconvolution objective rose from %.6g to %.6g; stopping", history[-1], j)
            diverged = True
            history.append(j)
            break
        history.append(j)
        if j < best[0]:
            best = (j, f, h)
    _, f, h = best
    hh, ww = g0.shape
    return DeblurResult(np.clip(f[:hh, :ww], 0.0, 1.0), h, history, diverged)
