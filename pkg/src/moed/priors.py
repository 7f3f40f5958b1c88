"""Gaussian priors for the primary (time) and secondary (space) parameters.

Covariance *operators* act on the weighted spaces ``(R^n, <.,.>_M)`` with
diagonal ``M``. Throughout the package an operator is represented as
``Gamma = Sigma @ M`` where ``Sigma`` is the pointwise covariance matrix of
the random vector. This makes ``Gamma`` self-adjoint in ``<.,.>_M`` and its
trace the discrete L2 trace.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, ParameterError
from .grids import SpaceGrid, TimeGrid

DEFAULT_SIGMA = 80.0
DEFAULT_ELL = 0.17
DEFAULT_M_MEAN = 65.0
DEFAULT_EPS = 4.5e-3
DEFAULT_ALPHA = 2.2e-1
DEFAULT_B_MEAN = 50.0

JITTER = 1e-10


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def matern32(s, t, sigma=DEFAULT_SIGMA, ell=DEFAULT_ELL):
    """Matern-3/2 covariance ``sigma^2 (1 + sqrt3 r/ell) exp(-sqrt3 r/ell)``.

    Broadcasts over ``s`` and ``t``.
    """
    if not sigma > 0 or not ell > 0:
        raise ParameterError(f"matern32 needs sigma > 0 and ell > 0, got {sigma}, {ell}")
    r = np.sqrt(3.0) * np.abs(np.asarray(s, dtype=float) - np.asarray(t, dtype=float)) / ell
    return sigma**2 * (1.0 + r) * np.exp(-r)


@dataclass(frozen=True)
class MatrixPrior:
    """Gaussian prior given by a dense pointwise covariance and diagonal weights.

    Parameters
    ----------
    mean : ndarray (n,)
    cov : ndarray (n, n)
        Symmetric positive definite pointwise covariance ``Sigma``.
    weights : ndarray (n,)
        Diagonal of the inner-product weight matrix ``M``.
    """

    mean: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        n = cov.shape[0]
        if cov.shape != (n, n) or np.shape(self.mean) != (n,) or np.shape(self.weights) != (n,):
            raise ParameterError("mean, cov and weights have inconsistent shapes")
        if np.any(np.asarray(self.weights) <= 0):
            raise ParameterError("weights must be positive")
        scale = max(np.abs(cov).max(), 1e-300)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ParameterError("covariance matrix is not symmetric")
        cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", _cholesky_with_jitter(cov))

    @property
    def size(self):
        return self.mean.size

    def apply(self, v):
        """Covariance operator action ``Sigma M v``; accepts (n,) or (n, k)."""
        v = np.asarray(v, dtype=float)
        return self.cov @ (self.weights.reshape(-1, *([1] * (v.ndim - 1))) * v)

    def apply_inv(self, v):
        """Inverse operator action ``M^{-1} Sigma^{-1} v``."""
        v = np.asarray(v, dtype=float)
        x = la.cho_solve((self.chol, True), v)
        return x / self.weights.reshape(-1, *([1] * (v.ndim - 1)))

    def dense(self):
        return self.cov * self.weights[None, :]

    def trace(self):
        return float(np.dot(np.diag(self.cov), self.weights))

    def pointwise_variance(self):
        return np.diag(self.cov).copy()

    def sample(self, seed=None, size=None):
        """Draw ``mean + L xi``; ``size`` draws are returned as rows."""
        rng = _rng(seed)
        n = self.size
        if size is None:
            return self.mean + self.chol @ rng.standard_normal(n)
        xi = rng.standard_normal((n, size))
        return (self.mean[:, None] + self.chol @ xi).T


def _cholesky_with_jitter(cov):
    try:
        return la.cholesky(cov, lower=True)
    except la.LinAlgError:
        pass
    jitter = JITTER * np.max(np.diag(cov))
    try:
        return la.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True)
    except la.LinAlgError as exc:
        raise FactorizationError("covariance is indefinite even after jitter") from exc


@dataclass(frozen=True)
class TimePrior(MatrixPrior):
    """Matern-3/2 prior on the time grid; the operator is the quadrature of the kernel."""

    sigma: float = DEFAULT_SIGMA
    ell: float = DEFAULT_ELL


def build_time_prior(grid: TimeGrid, sigma=DEFAULT_SIGMA, ell=DEFAULT_ELL,
                     mean_value=DEFAULT_M_MEAN) -> TimePrior:
    t = grid.nodes
    cov = matern32(t[:, None], t[None, :], sigma, ell)
    return TimePrior(mean=np.full(grid.n_m, float(mean_value)), cov=cov,
                     weights=grid.quad_weights.copy(), sigma=sigma, ell=ell)


class SpatialPrior:
    """Bi-Laplacian-type prior ``(-eps Lap + alpha I)^{-2}`` with Robin boundary.

    ``K = eps * L + alpha * M2 + robin * B`` is the weak form of the elliptic
    operator (``L`` stiffness, ``B`` lumped boundary measure). The covariance
    operator is ``Gamma = K^{-1} M2 K^{-1} M2``; its pointwise covariance is
    ``K^{-1} M2 K^{-1}``.
    """

    def __init__(self, grid: SpaceGrid, eps=DEFAULT_EPS, alpha=DEFAULT_ALPHA,
                 mean_value=DEFAULT_B_MEAN, robin=None):
        if eps < 0 or not alpha > 0:
            raise ParameterError(f"need eps >= 0 and alpha > 0, got {eps}, {alpha}")
        self.grid = grid
        self.eps = float(eps)
        self.alpha = float(alpha)
        self.robin = float(np.sqrt(eps * alpha)) if robin is None else float(robin)
        if self.robin < 0:
            raise ParameterError("Robin coefficient must be nonnegative")
        self.weights = grid.cell_weights.copy()
        self.mean = np.full(grid.n_b, float(mean_value))
        self.K = (self.eps * grid.stiffness()
                  + sp.diags(self.alpha * self.weights + self.robin * grid.boundary_weights())).tocsc()
        self._lu = spla.splu(self.K)
        if np.any(self._lu.U.diagonal() <= 0):
            raise FactorizationError("spatial prior operator is not positive definite")

    @property
    def size(self):
        return self.mean.size

    def _solve(self, v):
        return self._lu.solve(np.asarray(v, dtype=float))

    def _w(self, v):
        return self.weights.reshape(-1, *([1] * (np.ndim(v) - 1)))

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        w = self._w(v)
        return self._solve(w * self._solve(w * v))

    def apply_inv(self, v):
        v = np.asarray(v, dtype=float)
        w = self._w(v)
        return (self.K @ ((self.K @ v) / w)) / w

    def dense(self):
        return self.apply(np.eye(self.size))

    def pointwise_variance(self):
        Kinv = self._solve(np.eye(self.size))
        return np.einsum("ij,j,ij->i", Kinv, self.weights, Kinv)

    def trace(self):
        return float(np.dot(self.pointwise_variance(), self.weights))

    def sample(self, seed=None, size=None):
        rng = _rng(seed)
        n = self.size
        sw = np.sqrt(self.weights)
        if size is None:
            return self.mean + self._solve(sw * rng.standard_normal(n))
        xi = rng.standard_normal((n, size))
        return (self.mean[:, None] + self._solve(sw[:, None] * xi)).T


def apply_spatial_cov(prior: SpatialPrior, v):
    return prior.apply(v)


def sample(prior, rng_seed=None):
    return prior.sample(rng_seed)


def check_round_trip(prior, seed=0, tol=1e-9):
    """Assert ``Gamma^{-1} (Gamma v) = v`` to relative ``tol``."""
    v = np.random.default_rng(seed).standard_normal(prior.size)
    err = np.linalg.norm(prior.apply_inv(prior.apply(v)) - v) / np.linalg.norm(v)
    if err > tol:
        raise FactorizationError(f"prior round trip error {err:.2e} exceeds {tol:.0e}")
    return err


@dataclass(frozen=True)
class PriorPair:
    m: object
    b: object
