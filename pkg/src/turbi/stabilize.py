"""Sequence stabilization with low-rank filtered deformation fields.

Every field here is a forward map: for a frame ``I_i`` and the mean ``s_i`` of
its flows to the other frames, ``I_i(x) ~ J(x + s_i(x))`` for the undistorted
scene ``J``. The frame is therefore resampled through the inverse of the
fold-free version of ``s_i`` (see :func:`turbi.imagecore.warp_forward`).

Before averaging, the stack of flows leaving one frame is split by robust PCA
per displacement plane. When the sparse part is dense (no common pattern), the
plain column mean is used instead.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_sequence
from .imagecore import mean_magnitude, warp_forward
from .optflow import FlowParams, flow
from .quasiconformal import fold_free_field
from .rpca import RpcaParams, nonzero_density, rpca

log = logging.getLogger(__name__)

LOG_HEADER = ("stage", "frame", "branch_h", "branch_v", "density_h", "density_v",
              "raw_field_mag", "applied_field_mag")


@dataclass(frozen=True)
class StabilizeParams:
    """Settings shared by the three stabilization stages.

    ``boundary`` selects the border data of the fold-free reconstruction:
    ``"identity"`` pins the frame border, ``"field"`` keeps the estimated one.
    """

    density_threshold_fraction: float = 0.5
    clamp_epsilon: float = 0.01
    boundary: str = "identity"
    flow: FlowParams = field(default_factory=FlowParams)
    rpca: RpcaParams = field(default_factory=RpcaParams)
    n_threads: int = 1

    def __post_init__(self):
        if not 0 < self.density_threshold_fraction <= 1:
            raise ValueError("density_threshold_fraction must lie in (0, 1]")
        if not self.clamp_epsilon > 0:
            raise ValueError("clamp_epsilon must be > 0")
        if self.boundary not in ("identity", "field"):
            raise ValueError("boundary must be 'identity' or 'field'")
        if self.n_threads < 1:
            raise ValueError("n_threads must be >= 1")


@dataclass
class FieldChoice:
    field: np.ndarray
    branches: tuple  # per plane: "lowrank" or "centroid"
    densities: tuple
    rpca_failed: bool = False


def _map(fn, items, n_threads):
    # results come back in input order, so reductions stay deterministic
    if n_threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


def pairwise_fields(frames, flow_params=None, n_threads=1):
    """Table of flows between every ordered frame pair.

    Returns
    -------
    complex ndarray of shape (T, T, H, W)
        Entry ``[i, j]`` is ``flow(frames[i], frames[j])``; the diagonal is
        exactly zero.
    """
    frames = check_sequence(frames, min_frames=2)
    t = frames.shape[0]
    pairs = [(i, j) for i in range(t) for j in range(t) if i != j]
    fields = _map(lambda ij: flow(frames[ij[0]], frames[ij[1]], flow_params), pairs, n_threads)
    table = np.zeros((t, t) + frames.shape[1:], dtype=np.complex128)
    for (i, j), f in zip(pairs, fields):
        table[i, j] = f
    return table


class FlowCache:
    """Lazily computed pairwise flows of a fixed sequence.

    ``block(indices)`` returns the ``(k, k, H, W)`` table of
    :func:`pairwise_fields` restricted to `indices`, computing only pairs not
    seen before. Stages that work on overlapping subsets share the flows.
    """

    def __init__(self, frames, flow_params=None, n_threads=1):
        self.frames = check_sequence(frames, min_frames=2)
        self.flow_params = flow_params
        self.n_threads = n_threads
        self._flows = {}

    def __len__(self):
        return len(self._flows)

    def block(self, indices=None):
        t = self.frames.shape[0]
        idx = list(range(t)) if indices is None else [int(i) for i in indices]
        missing = [(i, j) for i in idx for j in idx if i != j and (i, j) not in self._flows]
        computed = _map(lambda ij: flow(self.frames[ij[0]], self.frames[ij[1]], self.flow_params),
                        missing, self.n_threads)
        self._flows.update(zip(missing, computed))
        table = np.zeros((len(idx), len(idx)) + self.frames.shape[1:], dtype=np.complex128)
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                if i != j:
                    table[a, b] = self._flows[(i, j)]
        return table


def stabilizing_field(columns, params=None):
    """Average a stack of fields after low-rank filtering.

    Parameters
    ----------
    columns : complex ndarray of shape (N, H, W), N >= 2
    params : StabilizeParams, optional

    Returns
    -------
    FieldChoice
        For each plane the mean of the low-rank columns when the sparse part
        has nonzero density below ``density_threshold_fraction``, otherwise
        the raw column mean (``M.mean(axis=1)`` on the pixels x frames matrix).
    """
    params = params or StabilizeParams()
    columns = np.asarray(columns, dtype=np.complex128)
    if columns.ndim != 3 or columns.shape[0] < 2:
        raise ValueError("stabilizing_field needs a (N, H, W) stack with N >= 2")
    n, h, w = columns.shape
    planes = []
    branches = []
    densities = []
    failed = False
    for part in (np.real, np.imag):
        m = np.ascontiguousarray(part(columns).reshape(n, h * w).T)
        res = rpca(m, params.rpca)
        density = nonzero_density(res.sparse)
        if not res.converged:
            log.warning("rpca did not converge (residual %.2e); using the column mean",
                        res.final_residual)
            failed = True
            planes.append(m.mean(axis=1))
            branches.append("centroid")
        elif density < params.density_threshold_fraction:
            planes.append(res.low_rank.mean(axis=1))
            branches.append("lowrank")
        else:
            planes.append(m.mean(axis=1))
            branches.append("centroid")
        densities.append(density)
    out = (planes[0] + 1j * planes[1]).reshape(h, w)
    return FieldChoice(out, tuple(branches), tuple(densities), failed)


def fold_free_warp_field(raw, params=None):
    """Clamp the Beltrami coefficient of `raw` and rebuild a fold-free field."""
    params = params or StabilizeParams()
    return fold_free_field(raw, epsilon=params.clamp_epsilon, boundary=params.boundary)


def _apply(frame, columns, params, stage, index):
    choice = stabilizing_field(columns, params)
    applied = fold_free_warp_field(choice.field, params)
    out = warp_forward(frame, applied)
    row = (stage, index, choice.branches[0], choice.branches[1],
           f"{choice.densities[0]:.6g}", f"{choice.densities[1]:.6g}",
           f"{mean_magnitude(choice.field):.6g}", f"{mean_magnitude(applied):.6g}")
    return out, row


def internal_stabilize(frames, params=None, table=None, frame_ids=None):
    """Warp each frame by the filtered mean of its flows to all other frames.

    Parameters
    ----------
    frames : ndarray of shape (T, H, W), T >= 2
    params : StabilizeParams, optional
    table : complex ndarray of shape (T, T, H, W), optional
        Precomputed :func:`pairwise_fields`.
    frame_ids : sequence of int, optional
        Labels used in the log rows (defaults to positions).

    Returns
    -------
    stabilized : ndarray of shape (T, H, W)
    rows : list of tuples matching ``LOG_HEADER``
    """
    params = params or StabilizeParams()
    frames = check_sequence(frames, min_frames=2)
    t = frames.shape[0]
    if table is None:
        table = pairwise_fields(frames, params.flow, params.n_threads)
    ids = list(range(t)) if frame_ids is None else list(frame_ids)
    # the zero self-flow is part of the average
    results = _map(lambda i: _apply(frames[i], table[i], params, "internal", ids[i]),
                   list(range(t)), params.n_threads)
    return np.stack([r[0] for r in results]), [r[1] for r in results]


def sharpest_indices(scores, count):
    """Indices of the `count` highest scores; ties go to the lower index. Sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.sort(np.argsort(-scores, kind="stable")[:count])


def absorbing_stabilize(stabilized, original, scores, subsample_indices, params=None):
    """Bring the sharpest frames of the full sequence onto the stabilized set.

    Parameters
    ----------
    stabilized : ndarray of shape (T_samp, H, W)
        Output of :func:`internal_stabilize`, in the order of `subsample_indices`.
    original : ndarray of shape (T, H, W)
    scores : ndarray of shape (T,)
        Sharpness of the original frames.
    subsample_indices : sequence of int
        Original indices of the stabilized frames (sorted).
    params : StabilizeParams, optional

    Returns
    -------
    frames : ndarray of shape (T_samp, H, W)
        One frame per sharp index, ordered by original index.
    sharp : ndarray of int
        Those original indices.
    rows : list of log rows for frames that had to be absorbed.
    """
    params = params or StabilizeParams()
    stabilized = check_sequence(stabilized, "stabilized", min_frames=1)
    original = check_sequence(original, "original")
    subsample_indices = [int(i) for i in subsample_indices]
    t_samp = stabilized.shape[0]
    if len(subsample_indices) != t_samp:
        raise ValueError("subsample_indices must match the stabilized frame count")
    if original.shape[0] < t_samp:
        raise ValueError("original sequence is shorter than the stabilized one")
    if np.asarray(scores).shape != (original.shape[0],):
        raise ValueError("scores must have one entry per original frame")
    sharp = sharpest_indices(scores, t_samp)
    position = {g: k for k, g in enumerate(subsample_indices)}
    outside = [j for j in sharp if j not in position]

    def absorb(j):
        columns = np.stack([flow(original[j], s, params.flow) for s in stabilized])
        if t_samp < 2:
            return warp_forward(original[j], fold_free_warp_field(columns[0], params)), None
        return _apply(original[j], columns, params, "absorb", j)

    absorbed = dict(zip(outside, _map(absorb, outside, params.n_threads)))
    frames = []
    rows = []
    for j in sharp:
        if j in position:
            frames.append(stabilized[position[j]])
        else:
            out, row = absorbed[j]
            frames.append(out)
            if row is not None:
                rows.append(row)
    return np.stack(frames), sharp, rows


def register_to_reference(frames, reference, params=None):
    """Align every frame to `reference` through a fold-free version of its flow.

    Returns
    -------
    registered : ndarray of shape (T, H, W)
    rows : list of log rows (branch columns read ``"direct"``)
    """
    params = params or StabilizeParams()
    frames = check_sequence(frames)
    reference = check_image(reference, "reference")
    if frames.shape[1:] != reference.shape:
        raise ValueError("frames and reference differ in size")

    def one(i):
        raw = flow(frames[i], reference, params.flow)
        applied = fold_free_warp_field(raw, params)
        row = ("register", i, "direct", "direct", "", "",
               f"{mean_magnitude(raw):.6g}", f"{mean_magnitude(applied):.6g}")
        return warp_forward(frames[i], applied), row

    results = _map(one, list(range(frames.shape[0])), params.n_threads)
    return np.stack([r[0] for r in results]), [r[1] for r in results]


def centroid_stabilize(frames, flow_params=None, n_threads=1, table=None):
    """Warp each frame by the plain mean of its flows to all frames (no filtering, no clamping)."""
    frames = check_sequence(frames, min_frames=2)
    if table is None:
        table = pairwise_fields(frames, flow_params, n_threads)
    t = frames.shape[0]
    return np.stack([warp_forward(frames[i], table[i].mean(axis=0)) for i in range(t)])


class SequenceStabilizer(TransformerMixin, BaseEstimator):
    """Internal stabilization as an estimator.

    ``fit`` is a no-op apart from validation; ``transform(frames)`` returns the
    stabilized stack and stores the log rows in ``log_rows_``.
    """

    def __init__(self, density_threshold_fraction=0.5, clamp_epsilon=0.01, boundary="identity",
                 n_threads=1):
        self.density_threshold_fraction = density_threshold_fraction
        self.clamp_epsilon = clamp_epsilon
        self.boundary = boundary
        self.n_threads = n_threads

    def _params(self):
        return StabilizeParams(self.density_threshold_fraction, self.clamp_epsilon, self.boundary,
                               n_threads=self.n_threads)

    def fit(self, X, y=None):
        check_sequence(X, min_frames=2)
        self.params_ = self._params()
        return self

    def transform(self, X):
        out, rows = internal_stabilize(X, self._params())
        self.log_rows_ = rows
        return out


class ReferenceRegistrar(TransformerMixin, BaseEstimator):
    """Register frames onto a reference image given to ``fit``."""

    def __init__(self, clamp_epsilon=0.01, boundary="identity", n_threads=1):
        self.clamp_epsilon = clamp_epsilon
        self.boundary = boundary
        self.n_threads = n_threads

    def fit(self, X, y=None):
        self.reference_ = check_image(X, "reference")
        return self

    def transform(self, X):
        params = StabilizeParams(clamp_epsilon=self.clamp_epsilon, boundary=self.boundary,
                                 n_threads=self.n_threads)
        out, self.log_rows_ = register_to_reference(X, self.reference_, params)
        return out
