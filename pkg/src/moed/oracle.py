"""Brute-force reference computations.

Nothing in here shares code paths with the measurement-space machinery:
posteriors come from dense inversion of the full ``(n_m + n_b)`` precision,
gradients from finite differences, designs from enumeration.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import FactorizationError, GuardError, ParameterError
from .forward import DENSE_LIMIT, MatrixMaps, assemble_dense
from .posterior import DesignWeights, classical_post_m, map_estimate
from .priors import MatrixPrior, PriorPair


@dataclass
class DenseProblem:
    """Dense linear-Gaussian problem ``y = F m + G b + noise``.

    ``cov_m``/``cov_b`` are pointwise covariances; the covariance operators
    are ``cov @ diag(weights)``.
    """

    F: np.ndarray
    G: np.ndarray
    cov_m: np.ndarray
    cov_b: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    sigma: np.ndarray
    mean_m: np.ndarray
    mean_b: np.ndarray

    def __post_init__(self):
        n_d, n_m = self.F.shape
        n_b = self.G.shape[1]
        shapes = [self.G.shape[0] == n_d, self.cov_m.shape == (n_m, n_m),
                  self.cov_b.shape == (n_b, n_b), self.M1.shape == (n_m,),
                  self.M2.shape == (n_b,), self.mean_m.shape == (n_m,),
                  self.mean_b.shape == (n_b,)]
        if not all(shapes):
            raise ParameterError("dense problem dimensions are inconsistent")
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (n_d,)).copy()

    @property
    def n_m(self):
        return self.F.shape[1]

    @property
    def n_b(self):
        return self.G.shape[1]

    @property
    def n_d(self):
        return self.F.shape[0]

    @property
    def gamma_m(self):
        return self.cov_m * self.M1[None, :]

    @property
    def gamma_b(self):
        return self.cov_b * self.M2[None, :]

    @classmethod
    def from_model(cls, maps, priors, sigma):
        """Assemble from PDE maps by unit-vector solves (``n_m + n_b`` forward solves)."""
        F, G = assemble_dense(maps)
        cov_b = priors.b.dense() / priors.b.weights[None, :]
        return cls(F, G, priors.m.cov.copy(), 0.5 * (cov_b + cov_b.T),
                   np.asarray(maps.time_weights, float), np.asarray(maps.space_weights, float),
                   sigma, priors.m.mean.copy(), priors.b.mean.copy())

    def priors(self):
        return PriorPair(MatrixPrior(self.mean_m, self.cov_m, self.M1),
                         MatrixPrior(self.mean_b, self.cov_b, self.M2))

    def maps(self):
        return MatrixMaps(self.F, self.G, self.M1, self.M2)


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + 0.1 * np.eye(n))


def random_problem(rng, n_m, n_b, n_d, sigma=None):
    """Random instance with SPD priors and non-uniform inner-product weights."""
    return DenseProblem(
        F=rng.standard_normal((n_d, n_m)),
        G=rng.standard_normal((n_d, n_b)),
        cov_m=random_spd(rng, n_m),
        cov_b=random_spd(rng, n_b),
        M1=rng.uniform(0.5, 1.5, n_m) / n_m,
        M2=rng.uniform(0.5, 1.5, n_b) / n_b,
        sigma=rng.uniform(0.2, 1.0, n_d) if sigma is None else sigma,
        mean_m=rng.standard_normal(n_m),
        mean_b=rng.standard_normal(n_b),
    )


@dataclass
class DensePosterior:
    cov: np.ndarray
    cov_m: np.ndarray
    cov_b: np.ndarray
    cov_mb: np.ndarray
    m_map: np.ndarray = None
    b_map: np.ndarray = None


def _w_sigma(p, w):
    return DesignWeights(w, p.sigma).w_sigma


def full_precision(p: DenseProblem, w):
    """``E* W_sigma E + Gpr^{-1}`` as a dense operator."""
    E = np.hstack([p.F, p.G])
    weights = np.concatenate([p.M1, p.M2])
    ws = _w_sigma(p, w)
    prior_inv = np.linalg.inv(np.block([
        [p.gamma_m, np.zeros((p.n_m, p.n_b))],
        [np.zeros((p.n_b, p.n_m)), p.gamma_b]]))
    return (E.T * ws[None, :]) @ E / weights[:, None] + prior_inv, prior_inv


def dense_posterior(p: DenseProblem, w, y=None, max_size=DENSE_LIMIT) -> DensePosterior:
    """Invert the full posterior precision and split it into marginal blocks."""
    n_m = p.n_m
    if n_m + p.n_b > max_size:
        raise GuardError(f"dense posterior limited to n_m + n_b <= {max_size}")
    H, prior_inv = full_precision(p, w)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("posterior precision is singular") from exc
    out = DensePosterior(cov=cov, cov_m=cov[:n_m, :n_m], cov_b=cov[n_m:, n_m:],
                         cov_mb=cov[:n_m, n_m:])
    if y is not None:
        E = np.hstack([p.F, p.G])
        weights = np.concatenate([p.M1, p.M2])
        rhs = (E.T @ (_w_sigma(p, w) * y)) / weights + prior_inv @ np.concatenate([p.mean_m, p.mean_b])
        theta = np.linalg.solve(H, rhs)
        out.m_map, out.b_map = theta[:n_m], theta[n_m:]
    return out


def schur_marginal_m(p: DenseProblem, w):
    """Marginal covariance of ``m`` from the Schur complement of the precision."""
    ws = _w_sigma(p, w)
    Fa = p.F.T / p.M1[:, None]
    Ga = p.G.T / p.M2[:, None]
    inner = np.linalg.inv(np.linalg.inv(p.gamma_b) + Ga @ (ws[:, None] * p.G))
    S = (np.linalg.inv(p.gamma_m) + Fa @ (ws[:, None] * p.F)
         - Fa @ (ws[:, None] * p.G) @ inner @ Ga @ (ws[:, None] * p.F))
    return np.linalg.inv(S)


def posterior_cov_direct(E, prior_op, w_sigma, weights):
    """``(E* W E + Gpr^{-1})^{-1}`` by dense inversion."""
    H = (E.T * w_sigma[None, :]) @ E / weights[:, None] + np.linalg.inv(prior_op)
    return np.linalg.inv(H)


def classical_dense(p: DenseProblem, w, b0=None, y=None):
    """Covariance (and MAP) of ``m`` with ``b`` frozen, by dense inversion."""
    ws = _w_sigma(p, w)
    Fa = p.F.T / p.M1[:, None]
    prior_inv = np.linalg.inv(p.gamma_m)
    H = Fa @ (ws[:, None] * p.F) + prior_inv
    cov = np.linalg.inv(H)
    if y is None:
        return cov, None
    rhs = Fa @ (ws * (y - p.G @ b0)) + prior_inv @ p.mean_m
    return cov, np.linalg.solve(H, rhs)


# -- finite differences -------------------------------------------------------


def fd_gradient(f, w, h=1e-5, lower=0.0, upper=1.0):
    """Central differences; one-sided where ``w`` is within ``h`` of the box.

    Returns ``(grad, one_sided)`` with ``one_sided`` a boolean mask.
    """
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    flags = np.zeros(w.size, dtype=bool)
    for j in range(w.size):
        wp, wm = w.copy(), w.copy()
        if w[j] - h < lower:
            wp[j] += h
            g[j] = (f(wp) - f(w)) / h
            flags[j] = True
        elif w[j] + h > upper:
            wm[j] -= h
            g[j] = (f(w) - f(wm)) / h
            flags[j] = True
        else:
            wp[j] += h
            wm[j] -= h
            g[j] = (f(wp) - f(wm)) / (2 * h)
    return g, flags


def psi_extended(C, D, sigma, w, dps=32):
    """``-tr(D (I + W C)^{-1} W)`` in ``dps``-digit arithmetic (mpmath).

    ``w`` may hold mpmath numbers. Returns an ``mpf``.
    """
    import mpmath

    with mpmath.workdps(dps):
        n = len(w)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
        ws = [mpmath.mpf(w[i]) / mpmath.mpf(sigma[i]) ** 2 for i in range(n)]
        Cm = mpmath.matrix(np.asarray(C, dtype=float).tolist())
        A = mpmath.eye(n) + mpmath.diag(ws) * Cm
        X = mpmath.inverse(A)
        total = mpmath.mpf(0)
        for i in range(n):
            total += ws[i] * mpmath.fsum(mpmath.mpf(D[i, j]) * X[j, i] for j in range(n))
        return -total


def fd_gradient_extended(C, D, sigma, w, h=1e-5, dps=32):
    """Central differences of ``psi_extended``; round-off is negligible at any ``h``."""
    import mpmath

    with mpmath.workdps(dps):
        wm = [mpmath.mpf(float(x)) for x in w]
        hm = mpmath.mpf(h)
        g = np.empty(len(w))
        for j in range(len(w)):
            up, dn = list(wm), list(wm)
            up[j] += hm
            dn[j] -= hm
            g[j] = float((psi_extended(C, D, sigma, up, dps) - psi_extended(C, D, sigma, dn, dps)) / (2 * hm))
    return g


# -- exhaustive search ----------------------------------------------------------


@dataclass
class ExhaustiveResult:
    best: tuple
    value: float
    table: list

    def weights(self, n_d):
        w = np.zeros(n_d)
        w[list(self.best)] = 1.0
        return w


def exhaustive_designs(criterion, K, n_d, max_designs=10**6) -> ExhaustiveResult:
    """Evaluate every binary design with exactly ``K`` sensors.

    Ties go to the lexicographically smallest index tuple.
    """
    if not 1 <= K <= n_d:
        raise ParameterError(f"need 1 <= K <= n_d, got K={K}, n_d={n_d}")
    if math.comb(n_d, K) > max_designs:
        raise GuardError(f"C({n_d}, {K}) designs exceeds the limit {max_designs}")
    table = []
    best, best_val = None, np.inf
    for idx in itertools.combinations(range(n_d), K):
        w = np.zeros(n_d)
        w[list(idx)] = 1.0
        val = criterion(w)
        table.append((idx, val))
        if val < best_val:
            best, best_val = idx, val
    return ExhaustiveResult(best=best, value=best_val, table=table)


# -- MAP error study -------------------------------------------------------------


def truth_m(t):
    """Synthetic source amplitude used as ground truth in the studies."""
    t = np.asarray(t, dtype=float)
    return 65 + 40 * np.exp(-((t - 0.3) / 0.1) ** 2) - 30 * np.exp(-((t - 0.7) / 0.08) ** 2)


def relative_error(m, m_true, weights):
    d = m - m_true
    return float(np.sqrt(d @ (weights * d)) / np.sqrt(m_true @ (weights * m_true)))


@dataclass
class StudyResult:
    rows: list
    summary: dict
    moed_identical: bool


def map_error_study(kernels, priors, designs, sigma_noise, m_true, b_true,
                    n_b_samples=20, n_noise_samples=50, seed=0):
    """Relative MAP errors for the marginalized and the frozen-``b`` posteriors.

    ``designs`` maps ``"moed"`` and ``"classical"`` to weight vectors. For each
    noise draw the data are synthesized from ``(m_true, b_true)``; the
    classical MAP is computed with ``b0 = b_true`` and with ``b0`` drawn from
    the prior. Rows are ``(noise, b_sample, kind, error)`` with ``b_sample``
    equal to -1 where no draw is involved.
    """
    maps = kernels.measurement_maps()
    n_d = kernels.n_d
    dw_m = DesignWeights(designs["moed"], sigma_noise)
    dw_c = DesignWeights(designs["classical"], sigma_noise)
    ss_b, ss_noise = np.random.SeedSequence(seed).spawn(2)
    b_draws = priors.b.sample(np.random.default_rng(ss_b), size=n_b_samples)
    noise = np.random.default_rng(ss_noise).standard_normal((n_noise_samples, n_d))
    noise *= dw_m.sigma[None, :]
    y_clean = maps.apply_F(m_true) + maps.apply_G(b_true)
    wts = priors.m.weights
    rows = []
    identical = True
    for s in range(n_noise_samples):
        y = y_clean + noise[s]
        m_ref, _ = map_estimate(kernels, dw_m, priors, maps, y)
        rows.append((s, -1, "moed", relative_error(m_ref, m_true, wts)))
        m_truth, _ = classical_post_m(kernels, dw_c, priors, maps, b_true, y)
        rows.append((s, -1, "classical_truth", relative_error(m_truth, m_true, wts)))
        for k in range(n_b_samples):
            # the marginalized MAP never sees the draw; recomputing checks that
            m_again, _ = map_estimate(kernels, dw_m, priors, maps, y)
            identical &= bool(np.array_equal(m_again, m_ref))
            m_k, _ = classical_post_m(kernels, dw_c, priors, maps, b_draws[k], y)
            rows.append((s, k, "classical_prior", relative_error(m_k, m_true, wts)))
    summary = {}
    for kind in ("moed", "classical_truth", "classical_prior"):
        e = np.array([r[3] for r in rows if r[2] == kind])
        q = np.quantile(e, [0.1, 0.25, 0.5, 0.75, 0.9])
        summary[kind] = {"count": int(e.size), "median": float(q[2]), "mean": float(e.mean()),
                         "q10": float(q[0]), "q25": float(q[1]), "q75": float(q[3]),
                         "q90": float(q[4])}
    return StudyResult(rows=rows, summary=summary, moed_identical=identical)
