"""Design criteria, their gradients and the design optimizers.

After the kernel precomputation every function here works on the
``n_d x n_d`` matrices only; no PDE solves happen.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .errors import ParameterError
from .posterior import DesignWeights, KernelMatrices, factor

DEFAULT_SCHEDULE = (1.0, 0.1, 0.01, 0.001)
THRESHOLD = 0.5


@dataclass
class CriterionEval:
    value: float
    gradient: np.ndarray = None
    n_obj_evals: int = 0


class Criterion:
    """``Psi(w) = -tr(D Q(w))`` for a given ``C`` (marginal) or ``CF`` (classical).

    ``offset`` is added to every value; pass ``tr(Gm)`` to get the trace of the
    posterior covariance itself. Evaluations are counted in ``n_evals``.
    """

    def __init__(self, C, D, sigma, offset=0.0):
        self.C = np.asarray(C, dtype=float)
        self.D = np.asarray(D, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (self.C.shape[0],)).copy()
        self.offset = float(offset)
        self.n_evals = 0

    @classmethod
    def marginal(cls, kernels: KernelMatrices, sigma, offset=0.0):
        return cls(kernels.C, kernels.D, sigma, offset)

    @classmethod
    def classical(cls, kernels: KernelMatrices, sigma, offset=0.0):
        return cls(kernels.CF, kernels.D, sigma, offset)

    @property
    def n_d(self):
        return self.C.shape[0]

    def _solve(self, w):
        dw = DesignWeights(w, self.sigma)
        Y = la.lu_solve(factor(self.C, dw), np.eye(self.n_d))
        return dw, Y

    def __call__(self, w):
        self.n_evals += 1
        dw, Y = self._solve(w)
        DY = self.D @ Y
        return self.offset - float(np.dot(dw.w_sigma, np.diag(DY)))

    def value_and_grad(self, w):
        self.n_evals += 1
        dw, Y = self._solve(w)
        DY = self.D @ Y
        value = self.offset - float(np.dot(dw.w_sigma, np.diag(DY)))
        # s_j^-2 [(C Y W D Y)_jj - (DY)_jj] with C Y W - I = -Y^T; this form has
        # no cancellation between the two terms
        grad = -np.einsum("ij,ij->j", Y, DY) / self.sigma**2
        return value, grad

    def grad_expanded(self, w):
        """Gradient in the two-term form ``s_j^-2 [sum_i (CY)_ji ws_i (DY)_ij - (DY)_jj]``."""
        dw, Y = self._solve(w)
        DY = self.D @ Y
        CY = self.C @ Y
        return (np.einsum("ji,i,ij->j", CY, dw.w_sigma, DY) - np.diag(DY)) / self.sigma**2

    def hessian_diag(self, w):
        """Diagonal of the Hessian, ``2 (CY)_jj (Y^T D Y)_jj / sigma_j^4``.

        The full Hessian is ``2 (CY) o (Y^T D Y)`` scaled by ``1/(s_j s_k)^2``,
        a Hadamard product of PSD matrices. Not counted as an evaluation.
        """
        _, Y = self._solve(w)
        T = Y.T @ self.D @ Y
        return 2.0 * np.einsum("ij,ji->i", self.C, Y) * np.diag(T) / self.sigma**4

    def evaluate(self, w, gradient=False):
        if gradient:
            v, g = self.value_and_grad(w)
            return CriterionEval(v, g, self.n_evals)
        return CriterionEval(self(w), None, self.n_evals)


def psi_marginal(kernels: KernelMatrices, dw: DesignWeights):
    return Criterion.marginal(kernels, dw.sigma)(dw.w)


def phi_marginal(kernels: KernelMatrices, dw: DesignWeights, prior_trace):
    """Trace of the marginal posterior covariance of ``m``."""
    return prior_trace + psi_marginal(kernels, dw)


def grad_psi(kernels: KernelMatrices, dw: DesignWeights):
    return Criterion.marginal(kernels, dw.sigma).value_and_grad(dw.w)[1]


def psi_classical(kernels: KernelMatrices, dw: DesignWeights, prior_trace, gradient=False):
    """Classical A-optimality criterion (trace with the secondary parameter frozen)."""
    crit = Criterion.classical(kernels, dw.sigma, offset=prior_trace)
    return crit.value_and_grad(dw.w) if gradient else crit(dw.w)


# -- greedy -------------------------------------------------------------------


@dataclass
class GreedyTrace:
    chosen: list
    values: list
    total_evals: int

    def weights(self, n_d):
        w = np.zeros(n_d)
        w[self.chosen] = 1.0
        return w


def greedy_cost(K, n_d):
    return K * n_d - (K - 1) * K // 2


def greedy_select(criterion, K, n_d) -> GreedyTrace:
    """Place ``K`` sensors one at a time, each time taking the largest decrease.

    Ties go to the lowest sensor index.
    """
    if not 1 <= K <= n_d:
        raise ParameterError(f"need 1 <= K <= n_d, got K={K}, n_d={n_d}")
    w = np.zeros(n_d)
    chosen, values = [], []
    evals = 0
    for _ in range(K):
        best, best_val = None, np.inf
        for j in range(n_d):
            if w[j]:
                continue
            w[j] = 1.0
            val = criterion(w)
            evals += 1
            w[j] = 0.0
            if val < best_val:
                best, best_val = j, val
        w[best] = 1.0
        chosen.append(best)
        values.append(best_val)
    return GreedyTrace(chosen=chosen, values=values, total_evals=evals)


# -- box-constrained solver ----------------------------------------------------


@dataclass
class BoxResult:
    w: np.ndarray
    value: float
    n_iter: int
    n_evals: int
    converged: bool
    flag: str = ""
    history: list = field(default_factory=list, repr=False)


def projected_gradient_norm(w, g, lower=0.0, upper=1.0):
    return float(np.linalg.norm(w - np.clip(w - g, lower, upper)))


ROUNDOFF = 10 * np.finfo(float).eps
NOISE_RTOL = 1e-12


def box_solver(fun, w0, lower=0.0, upper=1.0, rtol=1e-8, max_iter=5000, c1=1e-4,
               min_step=1e-16, scale=None) -> BoxResult:
    """Projected gradient with Armijo backtracking on ``[lower, upper]^n``.

    ``fun(w)`` returns ``(value, gradient)``. ``scale(w)``, if given, returns a
    positive diagonal metric ``d`` and the trial point becomes
    ``P(w - t g / d)``; without it ``d = 1``. The first trial step of each
    iteration is the Barzilai-Borwein length in that metric. With
    ``d = w_new - w`` a step is accepted when

    * ``f_new <= f + c1 g.d + ROUNDOFF |f|`` (Armijo up to rounding), or
    * ``f_new <= f + NOISE_RTOL |f|`` and ``g_new.d <= -(1 - 2 c1) g.d``, the
      slope form of the same test, used once decreases fall below the noise
      in ``f``.

    Accepted values therefore never rise by more than ``NOISE_RTOL |f|``.
    Stops when ``||w - P(w - g)|| <= rtol (1 + |f|)``.
    """
    w = np.clip(np.asarray(w0, dtype=float), lower, upper)
    f, g = fun(w)
    n_evals = 1
    history = [(0, f, 0.0, int(np.count_nonzero(w)))]
    step = 1.0 if scale is not None else 1.0 / max(np.abs(g).max(), 1e-300)
    for it in range(max_iter):
        if projected_gradient_norm(w, g, lower, upper) <= rtol * (1 + abs(f)):
            return BoxResult(w, f, it, n_evals, True, history=history)
        metric = np.ones_like(w) if scale is None else scale(w)
        while True:
            w_new = np.clip(w - step * g / metric, lower, upper)
            d = w_new - w
            f_new, g_new = fun(w_new)
            n_evals += 1
            gd = np.dot(g, d)
            if f_new <= f + c1 * gd + ROUNDOFF * abs(f):
                break
            # near a minimizer the decrease drops below the noise in f; accept on
            # the slope instead, which gives the same steps on a quadratic
            if f_new <= f + NOISE_RTOL * abs(f) and np.dot(g_new, d) <= -(1 - 2 * c1) * gd:
                break
            step *= 0.5
            if step < min_step:
                return BoxResult(w, f, it, n_evals, False, "line search failed", history)
        s, yv = d, g_new - g
        sy = np.dot(s, yv)
        w, f, g = w_new, f_new, g_new
        history.append((it + 1, f, step, int(np.count_nonzero(w))))
        step = np.dot(s, metric * s) / sy if sy > 0 else 2 * step
        step = min(max(step, 1e-12 / max(np.abs(g / metric).max(), 1e-300)), 1e12)
    converged = projected_gradient_norm(w, g, lower, upper) <= rtol * (1 + abs(f))
    return BoxResult(w, f, max_iter, n_evals, converged,
                     "" if converged else "max iterations reached", history)


# -- sparsification -----------------------------------------------------------


def l0_penalty(w, eps):
    """Concave surrogate ``sum w/(w+eps)`` of the counting norm, with gradient."""
    return float(np.sum(w / (w + eps))), eps / (w + eps) ** 2


def l1_penalty(w):
    return float(np.sum(w)), np.ones_like(w)


@dataclass
class ContinuationResult:
    w_relaxed: np.ndarray
    w_binary: np.ndarray
    epsilon_schedule: list
    gamma: float
    iterations: list
    stage_values: list
    relaxed_value: float
    binary_value: float
    n_evals: int
    converged: bool
    search_evals: int = 0
    search_steps: int = 0
    traces: list = field(default_factory=list, repr=False)

    @property
    def n_active(self):
        return int(self.w_binary.sum())


def binarize(w, threshold=THRESHOLD):
    return (np.asarray(w) >= threshold).astype(float)


def _penalized(criterion, gamma, penalty):
    def fun(w):
        v, g = criterion.value_and_grad(w)
        p, dp = penalty(w)
        return v + gamma * p, g + gamma * dp
    return fun


def jacobi_scale(criterion, floor=1e-8):
    """Hessian diagonal of the criterion, floored relative to its largest entry."""
    def scale(w):
        h = criterion.hessian_diag(w)
        return np.maximum(h, floor * max(h.max(), 1e-300))
    return scale


def sparsify_l0(criterion, gamma, schedule=DEFAULT_SCHEDULE, solver=box_solver, w0=None,
                threshold=THRESHOLD, scaled=True, **solver_kw) -> ContinuationResult:
    """Continuation over ``Psi + gamma sum p_eps(w)`` for decreasing ``eps``.

    Stage 0 uses the l1 penalty from ``w0`` (default all 0.5); each later
    stage is warm-started from the previous one. ``schedule=()`` gives the
    plain l1-penalized design. With ``scaled`` the solver measures steps in
    the criterion's Hessian diagonal; the penalty curvature is left out of
    the metric.
    """
    if gamma < 0:
        raise ParameterError("gamma must be nonnegative")
    n_d = criterion.n_d
    w = np.full(n_d, 0.5) if w0 is None else np.asarray(w0, dtype=float)
    start = criterion.n_evals
    if scaled and hasattr(criterion, "hessian_diag"):
        solver_kw.setdefault("scale", jacobi_scale(criterion))
    iters, values, traces = [], [], []
    res = solver(_penalized(criterion, gamma, l1_penalty), w, **solver_kw)
    traces.append(res.history)
    iters.append(res.n_iter)
    values.append(res.value)
    converged = res.converged
    w = res.w
    for eps in schedule:
        res = solver(_penalized(criterion, gamma, lambda v, e=eps: l0_penalty(v, e)), w, **solver_kw)
        traces.append(res.history)
        iters.append(res.n_iter)
        values.append(res.value)
        converged = converged and res.converged
        w = res.w
    n_evals = criterion.n_evals - start
    wb = binarize(w, threshold)
    return ContinuationResult(
        w_relaxed=w, w_binary=wb, epsilon_schedule=list(schedule), gamma=float(gamma),
        iterations=iters, stage_values=values, relaxed_value=criterion(w),
        binary_value=criterion(wb), n_evals=n_evals, converged=converged, traces=traces)


def sparsify_l1(criterion, gamma, **kw) -> ContinuationResult:
    return sparsify_l0(criterion, gamma, schedule=(), **kw)


def gamma_upper_bound(criterion):
    """A penalty weight at which ``w = 0`` satisfies the l1 optimality conditions."""
    _, g = criterion.value_and_grad(np.zeros(criterion.n_d))
    return max(float(np.max(-g)), 1e-300)


def bisect_gamma(criterion, target, schedule=DEFAULT_SCHEDULE, max_steps=20,
                 gamma_lo=None, gamma_hi=None, **kw):
    """Search ``gamma`` (geometrically) for a binary design with ``target`` sensors.

    Returns the result with the active count closest to ``target``; ties go to
    the lower objective. At most ``max_steps`` continuation runs.
    ``search_evals`` on the result counts criterion evaluations over the whole
    search, ``n_evals`` those of the returned run alone.
    """
    hi = 1.01 * gamma_upper_bound(criterion) if gamma_hi is None else gamma_hi
    lo = 1e-14 * hi if gamma_lo is None else gamma_lo
    best = None
    total = 0
    steps = 0
    for _ in range(max_steps):
        steps += 1
        gamma = np.sqrt(lo * hi)
        res = sparsify_l0(criterion, gamma, schedule=schedule, **kw)
        total += res.n_evals
        key = (abs(res.n_active - target), res.binary_value)
        if best is None or key < (abs(best.n_active - target), best.binary_value):
            best = res
        if res.n_active == target:
            break
        if res.n_active > target:
            lo = gamma
        else:
            hi = gamma
    best.search_evals = total
    best.search_steps = steps
    return best
