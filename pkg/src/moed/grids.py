"""Time and space grids with their quadrature weights.

The time weights (trapezoid rule) define the inner product on the primary
parameter space, the lumped nodal areas define the inner product on the
secondary parameter space. Both are diagonal.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on ``[t0, t_final]`` with ``n_m`` nodes."""

    t0: float
    t_final: float
    n_m: int
    nodes: np.ndarray = field(init=False, repr=False)
    quad_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_m < 2:
            raise ParameterError(f"time grid needs at least 2 nodes, got {self.n_m}")
        if not self.t_final > self.t0:
            raise ParameterError("t_final must exceed t0")
        nodes = np.linspace(self.t0, self.t_final, self.n_m)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "quad_weights", trapezoid_weights(nodes))

    @property
    def dt(self):
        return (self.t_final - self.t0) / (self.n_m - 1)


def trapezoid_weights(nodes):
    """Composite trapezoid weights for (possibly nonuniform) sorted nodes."""
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size == 1:
        return np.ones(1)
    dx = np.diff(nodes)
    if np.any(dx <= 0):
        raise ParameterError("nodes must be strictly increasing")
    w = np.zeros_like(nodes)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


@dataclass(frozen=True)
class SpaceGrid:
    """Node-centred uniform grid on the unit square.

    Nodes are numbered ``k = j * nx + i`` with ``i`` the x-index.
    """

    nx: int
    ny: int
    cell_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ParameterError("space grid needs at least 2 nodes per axis")
        wx = trapezoid_weights(np.linspace(0.0, 1.0, self.nx))
        wy = trapezoid_weights(np.linspace(0.0, 1.0, self.ny))
        object.__setattr__(self, "cell_weights", np.kron(wy, wx))

    @property
    def n_b(self):
        return self.nx * self.ny

    @property
    def hx(self):
        return 1.0 / (self.nx - 1)

    @property
    def hy(self):
        return 1.0 / (self.ny - 1)

    @property
    def h(self):
        return max(self.hx, self.hy)

    def coords(self):
        """Return ``(x, y)`` node coordinate arrays of length ``n_b``."""
        x = np.linspace(0.0, 1.0, self.nx)
        y = np.linspace(0.0, 1.0, self.ny)
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    def index(self, i, j):
        return j * self.nx + i

    def stiffness(self):
        """Symmetric weak-form Laplacian (Neumann), rows summing to zero.

        Edge conductances are dual-face length over edge length, so faces on
        the boundary carry half weight.
        """
        nx, ny, hx, hy = self.nx, self.ny, self.hx, self.hy
        rows, cols, vals = [], [], []

        def face(n, k):
            return 0.5 if k in (0, n - 1) else 1.0

        for j in range(ny):
            for i in range(nx - 1):
                rows.append(self.index(i, j))
                cols.append(self.index(i + 1, j))
                vals.append(face(ny, j) * hy / hx)
        for j in range(ny - 1):
            for i in range(nx):
                rows.append(self.index(i, j))
                cols.append(self.index(i, j + 1))
                vals.append(face(nx, i) * hx / hy)
        rows, cols, vals = np.array(rows), np.array(cols), np.array(vals)
        off = sp.coo_matrix((-vals, (rows, cols)), shape=(self.n_b, self.n_b))
        off = off + off.T
        diag = -np.asarray(off.sum(axis=1)).ravel()
        return (off + sp.diags(diag)).tocsc()

    def boundary_weights(self):
        """Lumped boundary measure per node (zero in the interior)."""
        bw = np.zeros((self.ny, self.nx))
        bw[0, :] += trapezoid_weights(np.linspace(0, 1, self.nx))
        bw[-1, :] += trapezoid_weights(np.linspace(0, 1, self.nx))
        bw[:, 0] += trapezoid_weights(np.linspace(0, 1, self.ny))
        bw[:, -1] += trapezoid_weights(np.linspace(0, 1, self.ny))
        return bw.ravel()

    def nearest_node(self, x, y):
        """Index of the grid node closest to ``(x, y)``; ties go to the lower index."""
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ParameterError(f"point ({x}, {y}) lies outside the unit square")
        X, Y = self.coords()
        d2 = (X - x) ** 2 + (Y - y) ** 2
        return int(np.argmin(d2))
