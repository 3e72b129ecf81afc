"""Robust PCA by the exact augmented Lagrange multiplier method.

Solves ``min ||L||_* + lam * ||S||_1  s.t.  L + S = D``. Each outer step
alternates singular-value shrinkage for ``L`` and soft thresholding for ``S``
until the inner problem converges, then updates the multiplier and grows the
penalty geometrically.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.extmath import randomized_svd

FULL_SVD_MAX_SIDE = 512
DENSITY_THRESHOLD = 1e-6


@dataclass(frozen=True)
class RpcaParams:
    """Solver settings; ``lam=None`` means ``1 / sqrt(max(m, n))``."""

    lam: float | None = None
    tol: float = 1e-7
    max_outer: int = 500
    mu0: float | None = None
    rho_mu: float = 1.6
    max_inner: int = 20

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be > 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if not self.rho_mu > 1:
            raise ValueError("rho_mu must be > 1")
        if self.mu0 is not None and not self.mu0 > 0:
            raise ValueError("mu0 must be > 0")


@dataclass
class RpcaResult:
    low_rank: np.ndarray
    sparse: np.ndarray
    iterations: int
    final_residual: float
    converged: bool


def soft_threshold(x, tau):
    """Entrywise ``sign(x) * max(|x| - tau, 0)``."""
    return x - np.clip(x, -tau, tau)


def _svd(x, rank_hint, rng_seed=0):
    m, n = x.shape
    if min(m, n) <= FULL_SVD_MAX_SIDE:
        return np.linalg.svd(x, full_matrices=False)
    k = min(min(m, n), max(rank_hint, 1) + 10)
    return randomized_svd(x, k, n_iter=4, random_state=rng_seed)


def _gram_shrink(x, tau):
    # x has many more rows than columns: shrink through the eigenpairs of x'x,
    # L = x V diag(max(1 - tau/s, 0)) V'. Kept values exceed tau, far above the
    # ~sqrt(eps) * s_max floor where squaring the spectrum loses accuracy.
    evals, v = np.linalg.eigh(x.T @ x)
    s = np.sqrt(np.maximum(evals, 0.0))
    keep = s > tau
    if not keep.any():
        return np.zeros_like(x), 0
    vk = v[:, keep]
    w = 1.0 - tau / s[keep]
    return (x @ vk) @ (w[:, None] * vk.T), int(keep.sum())


def singular_value_shrink(x, tau, rank_hint=None):
    """Shrink the singular values of `x` by `tau`; returns ``(result, rank)``."""
    m, n = x.shape
    if m >= 4 * n and n <= FULL_SVD_MAX_SIDE:
        return _gram_shrink(x, tau)
    if n >= 4 * m and m <= FULL_SVD_MAX_SIDE:
        low, r = _gram_shrink(x.T, tau)
        return low.T, r
    u, s, vt = _svd(x, rank_hint if rank_hint is not None else min(x.shape))
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    return (u[:, :r] * s[:r]) @ vt[:r], r


def rpca(matrix, params=None):
    """Decompose `matrix` into low-rank plus sparse parts.

    Parameters
    ----------
    matrix : ndarray of shape (m, n)
    params : RpcaParams, optional

    Returns
    -------
    RpcaResult
        ``converged`` is False when `max_outer` was reached; the last iterate
        is still returned with its residual.
    """
    params = params or RpcaParams()
    d = np.asarray(matrix, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise ValueError(f"rpca needs a non-empty 2-D matrix, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("rpca input contains non-finite values")
    m, n = d.shape
    lam = params.lam if params.lam is not None else 1.0 / math.sqrt(max(m, n))
    d_norm = np.linalg.norm(d)
    if d_norm == 0.0:
        return RpcaResult(np.zeros_like(d), np.zeros_like(d), 1, 0.0, True)

    spectral = np.linalg.norm(d, 2)
    # dual-feasible start for the multiplier
    y = np.sign(d)
    y /= max(np.linalg.norm(y, 2), np.max(np.abs(y)) / lam)
    mu = params.mu0 if params.mu0 is not None else 1.25 / spectral
    tol_proj = 1e-6 * d_norm

    low = np.zeros_like(d)
    sparse = np.zeros_like(d)
    rank = min(m, n)
    residual = 1.0
    outer = 0
    converged = False
    while outer < params.max_outer:
        outer += 1
        base = d + y / mu  # fixed during the inner loop
        for _ in range(params.max_inner):
            sparse_new = soft_threshold(base - low, lam / mu)
            low_new, rank = singular_value_shrink(base - sparse_new, 1.0 / mu,
                                                  rank_hint=min(rank + 1, min(m, n)))
            moved = max(np.linalg.norm(low_new - low), np.linalg.norm(sparse_new - sparse))
            low, sparse = low_new, sparse_new
            if moved < tol_proj:
                break
        z = d - low - sparse
        y = y + mu * z
        mu *= params.rho_mu
        residual = float(np.linalg.norm(z) / d_norm)
        if residual < params.tol:
            converged = True
            break
    return RpcaResult(low, sparse, outer, residual, converged)


def nonzero_density(sparse, threshold=DENSITY_THRESHOLD):
    """Fraction of entries with ``|value| > threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    s = np.asarray(sparse)
    if s.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(s) > threshold)) / s.size


class RobustPCA(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`rpca`.

    ``fit(X)`` stores ``low_rank_``, ``sparse_``, ``n_iter_`` and
    ``residual_``; ``transform(X)`` decomposes a new matrix and returns its
    low-rank part.

    Parameters
    ----------
    lam : float, optional
        Sparsity weight, default ``1 / sqrt(max(m, n))``.
    tol : float
    max_outer : int
    rho_mu : float
    """

    def __init__(self, lam=None, tol=1e-7, max_outer=500, rho_mu=1.6):
        self.lam = lam
        self.tol = tol
        self.max_outer = max_outer
        self.rho_mu = rho_mu

    def _params(self):
        return RpcaParams(lam=self.lam, tol=self.tol, max_outer=self.max_outer, rho_mu=self.rho_mu)

    def fit(self, X, y=None):
        res = rpca(X, self._params())
        self.low_rank_ = res.low_rank
        self.sparse_ = res.sparse
        self.n_iter_ = res.iterations
        self.residual_ = res.final_residual
        self.converged_ = res.converged
        return self

    def transform(self, X):
        return rpca(X, self._params()).low_rank

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).low_rank_
