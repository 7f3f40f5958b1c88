"""Advection-diffusion parameter-to-observable maps and their exact adjoints.

Implicit Euler in time, finite volumes in space (centred diffusion, upwind
advection) on the unit square with homogeneous Neumann flux. The adjoint is
the transpose of the assembled time-stepping map, so the discrete adjoint
identities hold to round-off.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, GuardError, ParameterError
from .grids import SpaceGrid, TimeGrid, trapezoid_weights

DENSE_LIMIT = 4000


@dataclass(frozen=True)
class PDEConfig:
    kappa: float = 1e-3
    v0: float = 1.0
    velocity: str = "cellular"
    source_center: tuple = (0.5, 0.35)
    source_width: float = 0.05

    def __post_init__(self):
        if not self.kappa > 0:
            raise ParameterError("kappa must be positive")
        if self.velocity not in VELOCITY_FIELDS:
            raise ParameterError(f"unknown velocity field {self.velocity!r}")
        x0, y0 = self.source_center
        if not (0 <= x0 <= 1 and 0 <= y0 <= 1):
            raise ParameterError("source center must lie in the unit square")
        if not self.source_width > 0:
            raise ParameterError("source width must be positive")


def cellular_velocity(x, y, v0=1.0):
    """Divergence-free single-vortex field with zero normal flux on the boundary."""
    vx = v0 * np.sin(np.pi * x) * np.cos(np.pi * y)
    vy = -v0 * np.cos(np.pi * x) * np.sin(np.pi * y)
    vx = np.where((x == 0.0) | (x == 1.0), 0.0, vx)
    vy = np.where((y == 0.0) | (y == 1.0), 0.0, vy)
    return vx, vy


def zero_velocity(x, y, v0=1.0):
    return np.zeros_like(x), np.zeros_like(y)


VELOCITY_FIELDS = {"cellular": cellular_velocity, "none": zero_velocity}


def mollified_delta(x, y, center=(0.5, 0.35), width=0.05):
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    return np.exp(-r2 / (2 * width**2)) / (2 * np.pi * width)


def upwind_advection(grid: SpaceGrid, vx, vy):
    """Pointwise first-order upwind discretization of ``v . grad u``."""
    nx, ny = grid.nx, grid.ny
    n = grid.n_b
    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    k = np.arange(n)
    rows, cols, vals = [], [], []

    def add(mask, shift, coeff):
        kk = k[mask]
        rows.extend([kk, kk])
        cols.extend([kk, kk + shift])
        vals.extend([coeff[mask], -coeff[mask]])

    # backward difference where v > 0, forward where v < 0
    add((vx > 0) & (I > 0), -1, vx / grid.hx)
    add((vx < 0) & (I < nx - 1), 1, -vx / grid.hx)
    add((vy > 0) & (J > 0), -nx, vy / grid.hy)
    add((vy < 0) & (J < ny - 1), nx, -vy / grid.hy)
    if not rows:
        return sp.csc_matrix((n, n))
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsc()


class AdvectionDiffusion:
    """Implicit-Euler solver for ``u_t - kappa Lap u + v . grad u = delta(x) m(t)``.

    Each step solves ``(M2 + dt A) u^{k+1} = M2 u^k + dt M2 delta m_{k+1}``
    where ``A = kappa L + M2 Adv`` in weak (mass-weighted) form.

    ``step_solves`` counts linear time-step solves over all instances.
    """

    step_solves = 0

    def __init__(self, space: SpaceGrid, time: TimeGrid, config: PDEConfig = PDEConfig()):
        self.space = space
        self.time = time
        self.config = config
        x, y = space.coords()
        vx, vy = VELOCITY_FIELDS[config.velocity](x, y, config.v0)
        self.mass = space.cell_weights
        M2 = sp.diags(self.mass)
        self.A = (config.kappa * space.stiffness() + M2 @ upwind_advection(space, vx, vy)).tocsc()
        self.step_matrix = (M2 + time.dt * self.A).tocsc()
        try:
            self._lu = spla.splu(self.step_matrix)
        except RuntimeError as exc:
            raise FactorizationError("time-step matrix is singular") from exc
        self.delta = mollified_delta(x, y, config.source_center, config.source_width)
        self.load = time.dt * self.mass * self.delta

    def step(self, rhs, trans="N"):
        AdvectionDiffusion.step_solves += 1
        return self._lu.solve(rhs, trans=trans)

    def solve_forward(self, m, b):
        """Full trajectory, shape ``(n_m, n_b)``; row ``k`` is the state at ``t_k``."""
        m = np.asarray(m, dtype=float)
        b = np.asarray(b, dtype=float)
        if m.shape != (self.time.n_m,) or b.shape != (self.space.n_b,):
            raise ParameterError("m or b has the wrong length")
        traj = np.empty((self.time.n_m, self.space.n_b))
        traj[0] = b
        for k in range(1, self.time.n_m):
            traj[k] = self.step(self.mass * traj[k - 1] + self.load * m[k])
        return traj


@dataclass(frozen=True)
class ObservationSetup:
    """Sensor locations and the averaging window of the observation operator."""

    sensor_coords: np.ndarray
    window: tuple = (0.95, 0.99)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.sensor_coords, dtype=float))
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 1:
            raise ParameterError("sensor_coords must be an (n_d, 2) array with n_d >= 1")
        object.__setattr__(self, "sensor_coords", c)
        ta, tb = self.window
        if ta > tb:
            raise ParameterError("observation window must satisfy t_a <= t_b")

    @property
    def n_d(self):
        return self.sensor_coords.shape[0]

    def sensor_nodes(self, grid: SpaceGrid):
        nodes = np.array([grid.nearest_node(x, y) for x, y in self.sensor_coords])
        if len(np.unique(nodes)) != len(nodes):
            raise ParameterError("two sensors snap to the same grid node")
        return nodes

    def time_weights(self, grid: TimeGrid):
        """Normalized trapezoid weights of the window average, length ``n_m``."""
        ta, tb = self.window
        if ta <= grid.t0 or tb > grid.t_final:
            raise ParameterError(f"window {self.window} is not inside ({grid.t0}, {grid.t_final}]")
        ka = int(np.argmin(np.abs(grid.nodes - ta)))
        kb = int(np.argmin(np.abs(grid.nodes - tb)))
        w = np.zeros(grid.n_m)
        if ka == kb:
            w[ka] = 1.0
        else:
            seg = trapezoid_weights(grid.nodes[ka:kb + 1])
            w[ka:kb + 1] = seg / seg.sum()
        return w


def observe(traj, nodes, time_weights):
    """Window average of the trajectory at the sensor nodes."""
    return time_weights @ traj[:, nodes]


class PDEMaps:
    """Actions of ``F``, ``G`` and their weighted adjoints via PDE solves.

    ``forward_solves`` and ``adjoint_solves`` count one solve per map
    application per right-hand side.
    """

    def __init__(self, pde: AdvectionDiffusion, setup: ObservationSetup):
        self.pde = pde
        self.setup = setup
        self.nodes = setup.sensor_nodes(pde.space)
        self.obs_weights = setup.time_weights(pde.time)
        self.time_weights = pde.time.quad_weights
        self.space_weights = pde.space.cell_weights
        self.n_m = pde.time.n_m
        self.n_b = pde.space.n_b
        self.n_d = setup.n_d
        self.forward_solves = 0
        self.adjoint_solves = 0
        self._first_obs = int(np.flatnonzero(self.obs_weights)[0])
        self._last_obs = int(np.flatnonzero(self.obs_weights)[-1])

    def reset_counters(self):
        self.forward_solves = 0
        self.adjoint_solves = 0

    def _forward_obs(self, m, b):
        # m: (n_m, k), b: (n_b, k); columns are independent runs
        pde = self.pde
        ow = self.obs_weights
        u = b.copy()
        y = ow[0] * u[self.nodes]
        for k in range(1, self._last_obs + 1):
            u = pde.step(pde.mass[:, None] * u + pde.load[:, None] * m[k][None, :])
            if ow[k]:
                y += ow[k] * u[self.nodes]
        return y

    def _adjoint(self, y):
        # transpose of _forward_obs: returns (F^T y, G^T y), Euclidean
        pde = self.pde
        ow = self.obs_weights
        k_cols = y.shape[1]
        Ft = np.zeros((self.n_m, k_cols))
        z = np.zeros((self.n_b, k_cols))
        z[self.nodes] = ow[self._last_obs] * y
        for k in range(self._last_obs, 0, -1):
            q = pde.step(z, trans="T")
            Ft[k] = pde.load @ q
            z = pde.mass[:, None] * q
            if ow[k - 1]:
                z[self.nodes] += ow[k - 1] * y
        return Ft, z

    @staticmethod
    def _cols(v, n):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != n:
            raise ParameterError(f"expected leading dimension {n}, got {v.shape[0]}")
        return v.reshape(n, -1), v.ndim == 1

    def apply_F(self, m):
        M, vec = self._cols(m, self.n_m)
        y = self._forward_obs(M, np.zeros((self.n_b, M.shape[1])))
        self.forward_solves += M.shape[1]
        return y[:, 0] if vec else y

    def apply_G(self, b):
        B, vec = self._cols(b, self.n_b)
        y = self._forward_obs(np.zeros((self.n_m, B.shape[1])), B)
        self.forward_solves += B.shape[1]
        return y[:, 0] if vec else y

    def apply_F_adj(self, y):
        Y, vec = self._cols(y, self.n_d)
        Ft, _ = self._adjoint(Y)
        self.adjoint_solves += Y.shape[1]
        out = Ft / self.time_weights[:, None]
        return out[:, 0] if vec else out

    def apply_G_adj(self, y):
        Y, vec = self._cols(y, self.n_d)
        _, Gt = self._adjoint(Y)
        self.adjoint_solves += Y.shape[1]
        out = Gt / self.space_weights[:, None]
        return out[:, 0] if vec else out

    def solve_forward(self, m, b):
        self.forward_solves += 1
        return self.pde.solve_forward(m, b)

    def observe(self, traj):
        return observe(traj, self.nodes, self.obs_weights)


class MatrixMaps:
    """Dense realization of the maps; performs no PDE solves."""

    forward_solves = 0
    adjoint_solves = 0

    def __init__(self, F, G, time_weights, space_weights):
        self.F = np.asarray(F, dtype=float)
        self.G = np.asarray(G, dtype=float)
        self.time_weights = np.asarray(time_weights, dtype=float)
        self.space_weights = np.asarray(space_weights, dtype=float)
        self.n_d, self.n_m = self.F.shape
        self.n_b = self.G.shape[1]
        if self.G.shape[0] != self.n_d:
            raise ParameterError("F and G must have the same number of rows")
        if self.time_weights.shape != (self.n_m,) or self.space_weights.shape != (self.n_b,):
            raise ParameterError("weights do not match map dimensions")

    def reset_counters(self):
        pass

    def _w(self, w, v):
        return w.reshape(-1, *([1] * (np.ndim(v) - 1)))

    def apply_F(self, m):
        return self.F @ m

    def apply_G(self, b):
        return self.G @ b

    def apply_F_adj(self, y):
        return (self.F.T @ y) / self._w(self.time_weights, y)

    def apply_G_adj(self, y):
        return (self.G.T @ y) / self._w(self.space_weights, y)


def assemble_dense(maps, max_size=DENSE_LIMIT):
    """Dense ``F`` and ``G`` from unit-vector applications (``n_m + n_b`` solves)."""
    if maps.n_m > max_size or maps.n_b > max_size:
        raise GuardError(f"dense assembly limited to {max_size} columns per map")
    return maps.apply_F(np.eye(maps.n_m)), maps.apply_G(np.eye(maps.n_b))


_TRAJ_MAGIC = b"MOEDTRJ1"


def save_trajectory(path, traj):
    """Write a trajectory as raw little-endian float64 after an 8-byte tag and ``(n_t, n_b)``."""
    traj = np.ascontiguousarray(traj, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(np.array(traj.shape, dtype="<u8").tobytes())
        fh.write(traj.tobytes())


def load_trajectory(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _TRAJ_MAGIC:
            raise ParameterError(f"{path} is not a trajectory file")
        n_t, n_b = np.frombuffer(fh.read(16), dtype="<u8")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_t * n_b:
        raise ParameterError(f"{path} is truncated")
    return data.reshape(int(n_t), int(n_b)).copy()
