import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _fixtures import low_rank_sparse
from turbi.rpca import (
    RobustPCA,
    RpcaParams,
    nonzero_density,
    rpca,
    singular_value_shrink,
    soft_threshold,
)

small = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(2, 8)),
               elements=st.floats(-5, 5))


def test_zero_matrix():
    res = rpca(np.zeros((6, 4)))
    assert res.iterations == 1 and res.converged
    assert not res.low_rank.any() and not res.sparse.any()


def test_rank_one_recovery(rng):
    u, v = rng.standard_normal(40), rng.standard_normal(20)
    d = np.outer(u, v)
    res = rpca(d)
    assert np.linalg.norm(res.low_rank - d) / np.linalg.norm(d) < 1e-6
    assert np.abs(res.sparse).sum() / np.abs(d).sum() < 1e-4


def test_low_rank_plus_spikes_recovery():
    low, sparse = low_rank_sparse(0)
    res = rpca(low + sparse)
    assert res.converged
    assert np.linalg.norm(res.low_rank - low) / np.linalg.norm(low) < 1e-4


@given(small)
def test_reconstruction_within_tolerance(d):
    res = rpca(d)
    if res.converged and np.linalg.norm(d) > 0:
        assert np.linalg.norm(d - res.low_rank - res.sparse) / np.linalg.norm(d) <= RpcaParams().tol


def test_non_convergence_is_flagged():
    low, sparse = low_rank_sparse(1, 60, 20)
    res = rpca(low + sparse, RpcaParams(max_outer=2))
    assert not res.converged and res.iterations == 2
    assert res.final_residual > RpcaParams().tol


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        rpca(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        rpca(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        RpcaParams(lam=0)
    with pytest.raises(ValueError):
        RpcaParams(tol=0)


@given(st.floats(-10, 10), st.floats(0, 5))
def test_soft_threshold_scalar_oracle(x, tau):
    expected = np.sign(x) * max(abs(x) - tau, 0.0)
    assert soft_threshold(np.array([x]), tau)[0] == pytest.approx(expected, abs=1e-12)


@given(small, st.floats(0, 3))
def test_singular_value_shrink_never_grows(x, tau):
    out, rank = singular_value_shrink(x, tau)
    s_in = np.linalg.svd(x, compute_uv=False)
    s_out = np.linalg.svd(out, compute_uv=False)
    assert np.all(s_out <= s_in + 1e-9)
    assert np.allclose(s_out, np.maximum(s_in - tau, 0), atol=1e-8)
    assert rank == np.count_nonzero(s_in > tau)


@pytest.mark.parametrize("shape", [(200, 10), (10, 200), (30, 30)])
def test_shrink_paths_agree_with_svd(rng, shape):
    x = rng.standard_normal(shape)
    tau = 2.0
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    expected = (u * np.maximum(s - tau, 0)) @ vt
    out, _ = singular_value_shrink(x, tau)
    assert np.allclose(out, expected, atol=1e-9)


def test_huge_lambda_gives_no_sparse_part(rng):
    d = rng.standard_normal((12, 8))
    res = rpca(d, RpcaParams(lam=1e6))
    assert np.abs(res.sparse).max() < 1e-9
    assert np.allclose(res.low_rank, d, atol=1e-6)


def test_nonzero_density_examples():
    assert nonzero_density(np.zeros((3, 3))) == 0
    assert nonzero_density(np.ones((4, 4)), 0.5) == 1
    m = np.zeros((10, 10))
    m.flat[:7] = 1
    assert nonzero_density(m, 0.5) == pytest.approx(0.07)
    with pytest.raises(ValueError):
        nonzero_density(m, -1)


def test_estimator_interface():
    low, sparse = low_rank_sparse(2, 60, 20)
    est = RobustPCA()
    out = est.fit_transform(low + sparse)
    assert out.shape == low.shape
    assert est.converged_ and est.sparse_.shape == low.shape
    assert est.get_params()["rho_mu"] == 1.6
    assert np.allclose(est.transform(low + sparse), out)
