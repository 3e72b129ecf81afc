"""Frame subset selection and reference extraction.

For a candidate size ``k`` the selection alternates between picking the ``k``
frames with the smallest cost ``E_i = ||I - I_i||^2 + lambda_samp * (1 - S_i)``
against the current reference ``I`` and replacing ``I`` by the temporal mean of
the picked frames. Both half-steps can only lower the mean cost ``E_Q``, so the
loop stops once the decrease drops below ``eps_energy``. The chosen size
maximizes ``alpha * (1 - exp(-rho * k)) - E_Q``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_sequence
from .imagecore import laplacian

log = logging.getLogger(__name__)

MAX_ALTERNATIONS = 1000


@dataclass(frozen=True)
class SubsampleParams:
    """Selection weights.

    ``alpha=None`` picks the cardinality weight automatically by
    ``alpha_rule``: ``"slope"`` matches the reward's slope at ``k = T/2`` to
    the mean slope of the ``E_Q(k)`` curve, ``"median"`` matches it to the
    median single-frame cost (this nearly always keeps every frame, because
    ``E_Q`` is a mean and grows much more slowly than one frame's cost).
    ``eps_energy=None`` uses ``1e-6 * pixel count`` and ``k_range`` optionally
    restricts the candidate sizes to ``[k_min, k_max]``.
    """

    lambda_samp: float = 200.0
    rho: float = 0.1
    alpha: float | None = None
    eps_energy: float | None = None
    k_range: tuple[int, int] | None = None
    warm_start: bool = True
    alpha_rule: str = "slope"

    def __post_init__(self):
        if self.alpha_rule not in ("slope", "median"):
            raise ValueError("alpha_rule must be 'slope' or 'median'")
        if not self.lambda_samp > 0:
            raise ValueError("lambda_samp must be > 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.eps_energy is not None and not self.eps_energy > 0:
            raise ValueError("eps_energy must be > 0")
        if self.k_range is not None:
            lo, hi = self.k_range
            if lo < 1 or hi < lo:
                raise ValueError("k_range must satisfy 1 <= k_min <= k_max")


@dataclass
class SubsampleResult:
    indices: np.ndarray
    reference: np.ndarray
    energy_curve: dict
    eq_trace: dict  # k -> E_Q after every half-step
    alpha: float
    degenerate: bool = False
    eq_by_k: dict = field(default_factory=dict)


def raw_sharpness(image):
    """L1 norm of the 5-point Laplacian."""
    return float(np.abs(laplacian(image)).sum())


def sharpness_scores(frames):
    """Per-frame sharpness affinely normalized to [0, 1] within the sequence.

    A sequence whose raw scores are all equal maps to zeros.
    """
    frames = check_sequence(frames)
    raw = np.array([raw_sharpness(f) for f in frames])
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def frame_costs(reference, frames, scores, lambda_samp):
    """``E_i = ||I - I_i||^2 + lambda_samp * (1 - S_i)`` for every frame."""
    diff = frames - reference[None]
    return np.einsum("tij,tij->t", diff, diff) + lambda_samp * (1.0 - np.asarray(scores))


def _mean_sorted(values):
    # summing in ascending order keeps the comparison between two subsets of equal
    # size exact: if one is elementwise no larger, so is its rounded sum
    return float(np.sort(values).sum() / values.size)


def quality_energy(reference, indices, frames, scores, lambda_samp):
    """Mean frame cost over `indices`."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("indices must be non-empty")
    frames = np.asarray(frames, dtype=np.float64)
    costs = frame_costs(reference, frames[idx], np.asarray(scores)[idx], lambda_samp)
    return _mean_sorted(costs)


def _select(costs, k):
    # stable sort: equal costs keep the lower frame index
    return np.sort(np.argsort(costs, kind="stable")[:k])


def best_subset_of_size(frames, scores, k, params, init_reference=None):
    """Alternating minimization of ``E_Q`` for subsets of size `k`.

    Parameters
    ----------
    frames : ndarray of shape (T, H, W)
    scores : ndarray of shape (T,)
        Normalized sharpness.
    k : int
        Subset size, ``1 <= k <= T``.
    params : SubsampleParams
    init_reference : ndarray of shape (H, W), optional
        Starting reference; default is the mean of the ``k`` sharpest frames.

    Returns
    -------
    reference, indices, eq_final, trace
        ``trace`` lists ``E_Q`` after every half-step and is non-increasing.
    """
    frames = check_sequence(frames)
    t = frames.shape[0]
    if not 1 <= k <= t:
        raise ValueError(f"k={k} outside [1, {t}]")
    scores = np.asarray(scores, dtype=np.float64)
    eps = params.eps_energy if params.eps_energy is not None else 1e-6 * frames[0].size
    lam = params.lambda_samp

    if init_reference is None:
        indices = np.sort(np.argsort(-scores, kind="stable")[:k])
    else:
        ref0 = np.asarray(init_reference, dtype=np.float64)
        indices = _select(frame_costs(ref0, frames, scores, lam), k)
    reference = frames[indices].mean(axis=0)
    costs = frame_costs(reference, frames, scores, lam)
    trace = [_mean_sorted(costs[indices])]

    for _ in range(MAX_ALTERNATIONS):
        # selection half-step: k smallest costs against the current reference
        new_indices = _select(costs, k)
        if np.array_equal(new_indices, indices):
            break
        trace.append(_mean_sorted(costs[new_indices]))
        # reference half-step: temporal mean of the selection
        indices = new_indices
        reference = frames[indices].mean(axis=0)
        costs = frame_costs(reference, frames, scores, lam)
        trace.append(_mean_sorted(costs[indices]))
        if trace[-3] - trace[-1] < eps:
            break
    return reference, indices, trace[-1], trace


def auto_alpha(frames, scores, params, eq_by_k=None):
    """Cardinality weight for ``alpha=None``.

    ``alpha * rho * exp(-rho * T / 2)`` is set to the median frame cost
    (``alpha_rule="median"``) or to the mean slope of ``eq_by_k`` over the
    candidate sizes (``"slope"``). Non-positive results fall back to 1.
    """
    t = frames.shape[0]
    gain = params.rho * math.exp(-params.rho * t / 2.0)
    if params.alpha_rule == "slope" and eq_by_k and len(eq_by_k) > 1:
        ks = sorted(eq_by_k)
        target = (eq_by_k[ks[-1]] - eq_by_k[ks[0]]) / (ks[-1] - ks[0])
    else:
        ref = frames.mean(axis=0)
        target = float(np.median(frame_costs(ref, frames, scores, params.lambda_samp)))
    alpha = target / gain
    return alpha if alpha > 0 else 1.0


def cardinality_term(k, alpha, rho):
    return alpha * (1.0 - math.exp(-rho * k))


def subsample(frames, params=None):
    """Select the frame subset maximizing ``alpha * (1 - exp(-rho k)) - E_Q``.

    Parameters
    ----------
    frames : ndarray of shape (T, H, W), T >= 2
    params : SubsampleParams, optional

    Returns
    -------
    SubsampleResult
        ``indices`` sorted; ``reference`` is exactly ``frames[indices].mean(axis=0)``;
        ``energy_curve`` maps each candidate ``k`` to its total energy ``E_k``.
    """
    params = params or SubsampleParams()
    frames = check_sequence(frames, min_frames=2)
    t = frames.shape[0]
    scores = sharpness_scores(frames)
    k_lo, k_hi = (2, t) if params.k_range is None else params.k_range
    k_lo, k_hi = max(k_lo, 1), min(k_hi, t)
    if k_lo > k_hi:
        raise ValueError(f"empty candidate range for T={t}")

    degenerate = bool(np.all(frames == frames[0:1]))
    eq_by_k = {}
    subsets = {}
    traces = {}
    reference = None
    for k in range(k_lo, k_hi + 1):
        init = reference if params.warm_start else None
        reference, idx, eq_final, trace = best_subset_of_size(frames, scores, k, params, init)
        traces[k] = trace
        eq_by_k[k] = eq_final
        subsets[k] = idx
    # E_Q(k) does not depend on alpha, so the weight can be balanced after the sweep
    alpha = params.alpha if params.alpha is not None else auto_alpha(frames, scores, params, eq_by_k)
    curve = {k: cardinality_term(k, alpha, params.rho) - eq_by_k[k] for k in eq_by_k}
    if degenerate:
        best_k = k_hi
        log.info("all frames identical; keeping every frame")
    else:
        best_k = max(curve, key=lambda k: (curve[k], -k))
    indices = subsets[best_k]
    return SubsampleResult(
        indices=indices,
        reference=frames[indices].mean(axis=0),
        energy_curve=curve,
        eq_trace=traces,
        alpha=alpha,
        degenerate=degenerate,
        eq_by_k=eq_by_k,
    )


def energy_curve_rows(result, rho):
    """Rows ``(k, cardinality_term, E_Q, E_k)`` for the energy curve table."""
    rows = []
    for k in sorted(result.energy_curve):
        rows.append((k, cardinality_term(k, result.alpha, rho), result.eq_by_k[k], result.energy_curve[k]))
    return rows


class FrameSubsampler(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`subsample`.

    ``fit(frames)`` sets ``indices_``, ``reference_``, ``energy_curve_`` and
    ``alpha_``; ``transform(frames)`` returns ``frames[indices_]``.
    """

    def __init__(self, lambda_samp=200.0, rho=0.1, alpha=None, eps_energy=None, k_range=None,
                 warm_start=True, alpha_rule="slope"):
        self.lambda_samp = lambda_samp
        self.rho = rho
        self.alpha = alpha
        self.eps_energy = eps_energy
        self.k_range = k_range
        self.warm_start = warm_start
        self.alpha_rule = alpha_rule

    def fit(self, X, y=None):
        params = SubsampleParams(self.lambda_samp, self.rho, self.alpha, self.eps_energy,
                                 self.k_range, self.warm_start, self.alpha_rule)
        res = subsample(X, params)
        self.indices_ = res.indices
        self.reference_ = res.reference
        self.energy_curve_ = res.energy_curve
        self.alpha_ = res.alpha
        self.result_ = res
        return self

    def transform(self, X):
        return check_sequence(X)[self.indices_]
