"""Measurement-space posterior machinery.

Everything here reduces the Gaussian posterior of ``(m, b)`` to linear algebra
with the ``n_d x n_d`` matrices

    C  = F Gm F* + G Gb G*
    CF = F Gm F*
    D  = F Gm^2 F*

which are precomputed once with ``3 n_d`` forward and ``2 n_d`` adjoint map
applications. ``Gm``, ``Gb`` denote the prior covariance operators.
"""
from dataclasses import dataclass

import warnings

import numpy as np
import scipy.linalg as la

from .errors import FactorizationError, GuardError, ParameterError
from .forward import DENSE_LIMIT, MatrixMaps

SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class DesignWeights:
    """Design weights ``w`` in ``[0, 1]`` and per-sensor noise standard deviations."""

    w: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).ravel()
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), w.shape).copy()
        if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
            raise ParameterError("design weights must lie in [0, 1]")
        if np.any(sigma <= 0):
            raise ParameterError("noise standard deviations must be positive")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_d(self):
        return self.w.size

    @property
    def w_sigma(self):
        """Diagonal of ``W_sigma = diag(w_i / sigma_i^2)``."""
        return self.w / self.sigma**2

    def with_weights(self, w):
        return DesignWeights(w, self.sigma)


@dataclass(frozen=True)
class KernelMatrices:
    """Precomputed measurement-space matrices plus the solve counts that produced them.

    ``F_adj`` and ``G_adj`` hold the columns ``F* e_i`` and ``G* e_i``; together
    with the weights they give the dense maps used after precomputation.
    """

    C: np.ndarray
    D: np.ndarray
    CF: np.ndarray
    F_adj: np.ndarray
    G_adj: np.ndarray
    time_weights: np.ndarray
    space_weights: np.ndarray
    forward_solves: int = 0
    adjoint_solves: int = 0

    @property
    def n_d(self):
        return self.C.shape[0]

    def measurement_maps(self):
        """Dense ``F`` (n_d x n_m) and ``G`` (n_d x n_b), realized without PDE solves."""
        F = (self.time_weights[:, None] * self.F_adj).T
        G = (self.space_weights[:, None] * self.G_adj).T
        return MatrixMaps(F, G, self.time_weights, self.space_weights)


def _symmetrize(X, name):
    scale = max(np.abs(X).max(), 1e-300)
    asym = np.abs(X - X.T).max() / scale
    if asym > SYMMETRY_TOL:
        raise FactorizationError(f"{name} asymmetry {asym:.2e}: adjoint is inconsistent")
    return 0.5 * (X + X.T)


def precompute_CD(maps, priors) -> KernelMatrices:
    """Build ``C``, ``CF`` and ``D`` column by column.

    For each sensor ``i``: ``a_i = Gm F* e_i``, ``d_i = F Gm a_i`` and
    ``c_i = F a_i + G Gb G* e_i``.
    """
    n_d = maps.n_d
    if priors.m.size != maps.n_m or priors.b.size != maps.n_b:
        raise ParameterError("prior and map dimensions differ")
    f0, a0 = maps.forward_solves, maps.adjoint_solves
    C = np.empty((n_d, n_d))
    CF = np.empty((n_d, n_d))
    D = np.empty((n_d, n_d))
    F_adj = np.empty((maps.n_m, n_d))
    G_adj = np.empty((maps.n_b, n_d))
    for i in range(n_d):
        e = np.zeros(n_d)
        e[i] = 1.0
        F_adj[:, i] = maps.apply_F_adj(e)
        a = priors.m.apply(F_adj[:, i])
        D[:, i] = maps.apply_F(priors.m.apply(a))
        CF[:, i] = maps.apply_F(a)
        G_adj[:, i] = maps.apply_G_adj(e)
        C[:, i] = CF[:, i] + maps.apply_G(priors.b.apply(G_adj[:, i]))
    return KernelMatrices(
        C=_symmetrize(C, "C"), D=_symmetrize(D, "D"), CF=_symmetrize(CF, "CF"),
        F_adj=F_adj, G_adj=G_adj,
        time_weights=np.asarray(maps.time_weights, dtype=float).copy(),
        space_weights=np.asarray(maps.space_weights, dtype=float).copy(),
        forward_solves=maps.forward_solves - f0,
        adjoint_solves=maps.adjoint_solves - a0,
    )


def factor(C, dw: DesignWeights):
    """LU factors of ``I + W_sigma C``."""
    n = C.shape[0]
    if dw.n_d != n:
        raise ParameterError(f"design has {dw.n_d} weights, kernels have {n} sensors")
    A = np.eye(n) + dw.w_sigma[:, None] * C
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(A, check_finite=True)
    if np.any(np.abs(np.diag(lu)) < np.finfo(float).eps * max(np.abs(A).max(), 1.0)):
        raise FactorizationError("I + W_sigma C is singular; C is probably not PSD")
    return lu, piv


def q_solve(C, dw: DesignWeights):
    """``Y = (I + W_sigma C)^{-1}`` from one LU factorization.

    ``C`` may be a :class:`KernelMatrices` (its marginal ``C`` is used) or a
    plain matrix. The columns of ``Q`` are ``q_i = (w_i / sigma_i^2) y_i``.
    """
    C = C.C if isinstance(C, KernelMatrices) else C
    return la.lu_solve(factor(C, dw), np.eye(C.shape[0]))


def q_matrix(C, dw: DesignWeights):
    return q_solve(C, dw) * dw.w_sigma[None, :]


def woodbury_covariance(E, prior_op, w_sigma, weights):
    """Right side of the measurement-space identity, dense.

    ``Gpr - Gpr E* (I + W E Gpr E*)^{-1} W E Gpr`` with ``E* = M^{-1} E^T``.
    """
    E_adj = E.T / weights[:, None]
    GE = prior_op @ E_adj
    S = np.eye(E.shape[0]) + w_sigma[:, None] * (E @ GE)
    return prior_op - GE @ np.linalg.solve(S, w_sigma[:, None] * (E @ prior_op))


class MarginalCovariance:
    """Operator ``v -> Gm v - Gm F* Q F Gm v`` for the marginal posterior of ``m``.

    ``C`` selects which measurement-space matrix defines ``Q``: the marginal
    one (default) or, for a frozen secondary parameter, ``CF``.
    """

    def __init__(self, kernels, dw, priors, maps, C=None):
        self.kernels = kernels
        self.dw = dw
        self.priors = priors
        self.maps = maps
        self._C = kernels.C if C is None else C
        self.Q = q_matrix(self._C, dw)

    def apply(self, v):
        pm = self.priors.m
        g = pm.apply(v)
        return g - pm.apply(self.maps.apply_F_adj(self.Q @ self.maps.apply_F(g)))

    @property
    def trace(self):
        D = self.kernels.D
        return self.priors.m.trace() - float(np.sum(D * self.Q.T))

    def dense(self, max_size=DENSE_LIMIT):
        n = self.priors.m.size
        if n > max_size:
            raise GuardError(f"dense posterior limited to n_m <= {max_size}")
        return self.apply(np.eye(n))

    def pointwise_variance(self, max_size=DENSE_LIMIT):
        """Diagonal of the pointwise covariance ``Gpost M1^{-1}``.

        Columnwise operator actions above ``max_size``.
        """
        w = self.priors.m.weights
        n = w.size
        if n <= max_size:
            return np.diag(self.dense(max_size)) / w
        out = np.empty(n)
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0 / w[j]
            out[j] = self.apply(e)[j]
        return out


def marginal_post_m(kernels, dw, priors, maps=None):
    maps = kernels.measurement_maps() if maps is None else maps
    return MarginalCovariance(kernels, dw, priors, maps)


@dataclass
class PosteriorBlocks:
    cov_m: np.ndarray
    cov_b: np.ndarray
    cov_mb: np.ndarray
    cov_bm: np.ndarray
    m_map: np.ndarray = None
    b_map: np.ndarray = None

    def assemble(self):
        return np.block([[self.cov_m, self.cov_mb], [self.cov_bm, self.cov_b]])


def posterior_blocks(kernels, dw, priors, maps=None, y=None, max_size=DENSE_LIMIT):
    """Dense blocks of the joint posterior covariance (and MAP if ``y`` is given)."""
    maps = kernels.measurement_maps() if maps is None else maps
    if maps.n_m > max_size or maps.n_b > max_size:
        raise GuardError(f"dense posterior blocks limited to {max_size}")
    Q = q_matrix(kernels.C, dw)
    Gm = priors.m.dense()
    Gb = priors.b.dense()
    FGm = maps.apply_F(Gm)
    GGb = maps.apply_G(Gb)
    GmFt = maps.apply_F_adj(np.eye(maps.n_d))
    GmFt = priors.m.apply(GmFt)
    GbGt = priors.b.apply(maps.apply_G_adj(np.eye(maps.n_d)))
    cov_m = Gm - GmFt @ Q @ FGm
    cov_b = Gb - GbGt @ Q @ GGb
    cov_mb = -GmFt @ Q @ GGb
    cov_bm = -GbGt @ Q @ FGm
    out = PosteriorBlocks(cov_m=cov_m, cov_b=cov_b, cov_mb=cov_mb, cov_bm=cov_bm)
    if y is not None:
        out.m_map, out.b_map = map_estimate(kernels, dw, priors, maps, y)
    return out


def map_estimate(kernels, dw, priors, maps, y):
    """MAP pair from the block formulas, with operator actions only.

    ``m = Gpost_m (F* Ws y + Gm^{-1} m_pr) + Gpost_mb (G* Ws y + Gb^{-1} b_pr)``
    and symmetrically for ``b`` with ``Gpost_mb* = -Gb G* Q F Gm``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (kernels.n_d,):
        raise ParameterError(f"data must have length {kernels.n_d}")
    maps = kernels.measurement_maps() if maps is None else maps
    pm, pb = priors.m, priors.b
    Q = q_matrix(kernels.C, dw)
    ws = dw.w_sigma
    rm = maps.apply_F_adj(ws * y) + pm.apply_inv(pm.mean)
    rb = maps.apply_G_adj(ws * y) + pb.apply_inv(pb.mean)

    def post_m(v):
        g = pm.apply(v)
        return g - pm.apply(maps.apply_F_adj(Q @ maps.apply_F(g)))

    def post_b(v):
        g = pb.apply(v)
        return g - pb.apply(maps.apply_G_adj(Q @ maps.apply_G(g)))

    def post_mb(v):
        return -pm.apply(maps.apply_F_adj(Q @ maps.apply_G(pb.apply(v))))

    def post_bm(v):
        return -pb.apply(maps.apply_G_adj(Q @ maps.apply_F(pm.apply(v))))

    m_map = post_m(rm) + post_mb(rb)
    b_map = post_b(rb) + post_bm(rm)
    return m_map, b_map


def classical_post_m(kernels, dw, priors, maps, b0, y):
    """Posterior of ``m`` with the secondary parameter frozen at ``b0``.

    Returns ``(m_map, covariance)``; the covariance uses ``CF`` in place of ``C``
    and so does not depend on ``b0``.
    """
    maps = kernels.measurement_maps() if maps is None else maps
    y = np.asarray(y, dtype=float)
    cov = MarginalCovariance(kernels, dw, priors, maps, C=kernels.CF)
    pm = priors.m
    shifted = y - maps.apply_G(np.asarray(b0, dtype=float))
    rhs = maps.apply_F_adj(dw.w_sigma * shifted) + pm.apply_inv(pm.mean)
    return cov.apply(rhs), cov
