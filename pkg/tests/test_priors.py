import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from moed.errors import FactorizationError, ParameterError
from moed.grids import SpaceGrid, TimeGrid
from moed.priors import (DEFAULT_ALPHA, DEFAULT_B_MEAN, DEFAULT_ELL, DEFAULT_EPS, DEFAULT_M_MEAN,
                         DEFAULT_SIGMA, MatrixPrior, SpatialPrior, apply_spatial_cov,
                         build_time_prior, check_round_trip, matern32, sample)


def test_default_prior_parameters():
    assert (DEFAULT_SIGMA, DEFAULT_ELL, DEFAULT_M_MEAN) == (80.0, 0.17, 65.0)
    assert (DEFAULT_EPS, DEFAULT_ALPHA) == (4.5e-3, 2.2e-1)
    assert DEFAULT_B_MEAN == 50.0


def test_matern_zero_distance_and_one_length_scale():
    assert matern32(0.3, 0.3, sigma=2.5, ell=0.4) == pytest.approx(6.25)
    expected = (1 + np.sqrt(3)) * np.exp(-np.sqrt(3))
    assert matern32(0.0, 0.7, sigma=1.0, ell=0.7) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.4833577245965077, rel=1e-14)


@pytest.mark.parametrize("sigma,ell", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, -2.0)])
def test_matern_rejects_nonpositive(sigma, ell):
    with pytest.raises(ParameterError):
        matern32(0.0, 1.0, sigma, ell)


@given(st.floats(0.01, 10), st.floats(0.01, 5))
def test_matern_monotone_in_distance(sigma, ell):
    r = np.linspace(0, 5, 200)
    k = matern32(0.0, r, sigma, ell)
    assert np.all(np.diff(k) <= 1e-12 * sigma**2)


def test_time_prior_entries_match_scalar_kernel():
    p = build_time_prior(TimeGrid(0.0, 1.0, 3), sigma=1.0, ell=0.5, mean_value=0.0)
    t = [0.0, 0.5, 1.0]
    for i in range(3):
        for j in range(3):
            assert p.cov[i, j] == pytest.approx(matern32(t[i], t[j], 1.0, 0.5), rel=1e-15)


def test_time_prior_long_length_scale_is_constant_kernel():
    p = build_time_prior(TimeGrid(0.0, 1.0, 2), sigma=1.0, ell=1e7, mean_value=0.0)
    assert np.allclose(p.cov, np.ones((2, 2)), atol=1e-12)
    # the all-ones matrix is singular; the factor exists thanks to the jitter
    assert np.all(np.isfinite(p.chol))


def test_time_prior_defaults_and_psd():
    p = build_time_prior(TimeGrid(0.0, 1.0, 65))
    assert np.all(p.mean == 65.0)
    assert np.allclose(p.cov, p.cov.T, rtol=0, atol=1e-12 * p.cov.max())
    ev = np.linalg.eigvalsh(p.cov)
    assert ev.min() >= -1e-10 * ev.max()
    assert p.trace() == pytest.approx(80.0**2, rel=1e-12)


def test_matrix_prior_validation():
    with pytest.raises(ParameterError):
        MatrixPrior(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]), np.ones(2))
    with pytest.raises(ParameterError):
        MatrixPrior(np.zeros(2), np.eye(2), np.array([1.0, 0.0]))
    with pytest.raises(FactorizationError):
        MatrixPrior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))


def test_time_prior_round_trip():
    p = build_time_prior(TimeGrid(0.0, 1.0, 65))
    assert check_round_trip(p) < 1e-9


def _dense_K(grid, eps, alpha, robin):
    return (eps * grid.stiffness() + sp.diags(alpha * grid.cell_weights
                                             + robin * grid.boundary_weights())).toarray()


def test_spatial_identity_convention_without_laplacian():
    g = SpaceGrid(6, 5)
    p = SpatialPrior(g, eps=0.0, alpha=1.0)
    assert p.robin == 0.0
    v = np.random.default_rng(1).standard_normal(g.n_b)
    # K = M2, so Gamma = M2^-1 M2 M2^-1 M2 is the identity in this convention
    assert np.allclose(apply_spatial_cov(p, v), v, rtol=1e-13, atol=0)
    M = np.diag(g.cell_weights)
    Kinv = np.linalg.inv(M)
    assert np.allclose(p.dense(), Kinv @ M @ Kinv @ M, atol=1e-12)


def test_spatial_covariance_matches_dense_assembly():
    g = SpaceGrid(7, 6)
    p = SpatialPrior(g)
    Kinv = np.linalg.inv(_dense_K(g, DEFAULT_EPS, DEFAULT_ALPHA, np.sqrt(DEFAULT_EPS * DEFAULT_ALPHA)))
    M = np.diag(g.cell_weights)
    ref = Kinv @ M @ Kinv @ M
    assert np.abs(p.dense() - ref).max() <= 1e-10 * np.abs(ref).max()
    assert np.allclose(p.pointwise_variance(), np.diag(Kinv @ M @ Kinv), rtol=1e-10)
    assert apply_spatial_cov(p, np.zeros(g.n_b)) == pytest.approx(np.zeros(g.n_b))


def test_spatial_self_adjoint_in_weighted_product(rng):
    g = SpaceGrid(12, 12)
    p = SpatialPrior(g)
    M = g.cell_weights
    for _ in range(10):
        v, w = rng.standard_normal((2, g.n_b))
        lhs = np.dot(p.apply(v), M * w)
        rhs = np.dot(M * v, p.apply(w))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(w)


def test_spatial_round_trip_and_robin_override():
    g = SpaceGrid(24, 24)
    p = SpatialPrior(g)
    assert p.robin == pytest.approx(np.sqrt(4.5e-3 * 0.22))
    assert check_round_trip(p) < 1e-9
    q = SpatialPrior(g, robin=0.0)
    assert q.robin == 0.0
    # removing the Robin term raises the boundary variance
    assert q.pointwise_variance()[0] > p.pointwise_variance()[0]
    with pytest.raises(ParameterError):
        SpatialPrior(g, alpha=0.0)


def test_sampling_deterministic():
    p = build_time_prior(TimeGrid(0.0, 1.0, 9))
    assert np.array_equal(sample(p, 3), sample(p, 3))
    s = SpatialPrior(SpaceGrid(5, 5))
    assert np.array_equal(s.sample(7), s.sample(7))
    assert not np.array_equal(s.sample(7), s.sample(8))


def test_sample_mean_within_three_standard_errors():
    p = build_time_prior(TimeGrid(0.0, 1.0, 17))
    draws = p.sample(11, size=10_000)
    se = np.sqrt(np.diag(p.cov) / 10_000)
    assert np.all(np.abs(draws.mean(axis=0) - p.mean) <= 3 * se)
    s = SpatialPrior(SpaceGrid(8, 8))
    draws = s.sample(12, size=10_000)
    se = np.sqrt(s.pointwise_variance() / 10_000)
    assert np.all(np.abs(draws.mean(axis=0) - s.mean) <= 3 * se)


def test_two_node_sample_covariance():
    p = build_time_prior(TimeGrid(0.0, 0.2, 2), sigma=2.0, ell=0.3)
    draws = p.sample(5, size=100_000)
    emp = np.cov(draws.T)
    assert np.allclose(emp, p.cov, rtol=0.05)


def test_spatial_sample_covariance_matches_pointwise():
    s = SpatialPrior(SpaceGrid(4, 4))
    draws = s.sample(9, size=200_000)
    Kinv = np.linalg.inv(s.K.toarray())
    ref = Kinv @ np.diag(s.weights) @ Kinv
    assert np.abs(np.cov(draws.T) - ref).max() <= 0.05 * np.abs(ref).max()
