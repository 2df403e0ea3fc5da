"""Obstacle problems for the value function: projected SOR for the
stationary complementarity system, a brute-force active-set oracle,
a penalized variant solved by semismooth Newton, and the backward
parabolic problem by implicit Euler.

Sign convention throughout: solve max(L u - f, u - psi) = 0, i.e.
u <= psi, L u - f <= 0, with equality in at least one branch per node.
The complementarity residual is reported in min form,
``min(psi - u, f - L u)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .grid import (
    FieldTrajectory,
    Grid,
    ScalarField,
    TimeGrid,
    elliptic_matrix,
)

__all__ = [
    "ObstacleSolveConfig",
    "ObstacleConvergenceError",
    "solve_obstacle_stationary",
    "obstacle_oracle",
    "solve_obstacle_penalized",
    "solve_obstacle_parabolic",
    "complementarity_residual",
]


@dataclass
class ObstacleSolveConfig:
    """Iteration controls shared by the obstacle solvers."""

    tol: float = 1e-10
    max_iter: int = 100_000
    relaxation: float = 1.5
    epsilon: float | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.relaxation < 2.0:
            raise ValueError("relaxation must lie in (0, 2)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


class ObstacleConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@lru_cache(maxsize=None)
def _rb_colors(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Checkerboard split; stencil neighbors always have opposite color."""
    idx = np.arange(grid.n_total)
    if grid.dim == 1:
        parity = idx % 2
    else:
        n1 = grid.n_interior[1]
        parity = (idx // n1 + idx % n1) % 2
    return idx[parity == 0], idx[parity == 1]


def complementarity_residual(matrix, u: np.ndarray, f: np.ndarray, psi: np.ndarray) -> float:
    """Max-norm of min(psi - u, f - M u)."""
    r = np.minimum(psi - u, f - matrix @ u)
    return float(np.max(np.abs(r))) if r.size else 0.0


def _psor(matrix, f, psi, u0, grid, config) -> np.ndarray:
    """Projected SOR on max(M u - f, u - psi) = 0 for an SPD M-matrix M.

    Gauss-Seidel in red-black order with projection onto u <= psi after
    every nodal update; vectorized one color at a time.
    """
    d = matrix.diagonal()
    colors = _rb_colors(grid)
    omega = config.relaxation
    u = np.array(u0, dtype=float, copy=True)
    for it in range(config.max_iter):
        for c in colors:
            mu = matrix @ u
            u[c] = np.minimum(u[c] + omega * (f[c] - mu[c]) / d[c], psi[c])
        res = complementarity_residual(matrix, u, f, psi)
        if res <= config.tol:
            return u
    raise ObstacleConvergenceError("projected SOR did not converge", res, config.max_iter)


def _linsolve(matrix, rhs, grid: Grid) -> np.ndarray:
    """Direct solve; banded fast path for 1D tridiagonal systems."""
    if grid.dim == 1:
        n = grid.n_total
        ab = np.zeros((3, n))
        ab[0, 1:] = matrix.diagonal(1)
        ab[1, :] = matrix.diagonal(0)
        ab[2, :-1] = matrix.diagonal(-1)
        return solve_banded((1, 1), ab, rhs)
    return spla.spsolve(matrix.tocsc(), rhs)


def solve_obstacle_stationary(
    source: ScalarField,
    obstacle: ScalarField,
    config: ObstacleSolveConfig | None = None,
    with_zero_order: bool = True,
    u0: ScalarField | None = None,
    matrix=None,
) -> ScalarField:
    """Solve max((-lap + id) u - f, u - psi) = 0 by projected SOR.

    An explicit SPD M-matrix can replace the default elliptic operator
    (used by the parabolic stepper). with_zero_order drops the +u term
    for the evolutive operator family.
    """
    config = config or ObstacleSolveConfig()
    grid = source.grid
    if obstacle.grid != grid:
        raise ValueError("source and obstacle must share one grid")
    m = elliptic_matrix(grid, with_zero_order) if matrix is None else matrix
    start = obstacle.values if u0 is None else u0.values
    u = _psor(m, source.values, obstacle.values, start, grid, config)
    return ScalarField(grid, u)


def obstacle_oracle(
    source: ScalarField,
    obstacle: ScalarField,
    with_zero_order: bool = True,
    check_tol: float = 1e-9,
    require_unique: bool = False,
) -> ScalarField:
    """Exhaustive active-set solve, for verification on tiny grids.

    Enumerates every subset S of nodes, pins u = psi on S, solves the
    linear system on the complement, and returns the u that passes the
    complementarity test (u <= psi everywhere, M u - f <= 0 on S).
    Independent of the iterative path; requires <= 16 nodes.
    """
    grid = source.grid
    n = grid.n_total
    if n > 16:
        raise ValueError(f"oracle is exponential; refuse n = {n} > 16")
    a = elliptic_matrix(grid, with_zero_order).toarray()
    f = source.values
    psi = obstacle.values
    found = None
    for mask_bits in range(1 << n):
        active = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
        free = ~active
        u = psi.copy()
        if free.any():
            sub = a[np.ix_(free, free)]
            rhs = f[free] - a[np.ix_(free, active)] @ psi[active]
            u[free] = np.linalg.solve(sub, rhs)
        if np.any(u > psi + check_tol):
            continue
        if active.any() and np.any((a @ u - f)[active] > check_tol):
            continue
        if not require_unique:
            return ScalarField(grid, u)
        if found is not None and not np.allclose(found, u, atol=10 * check_tol):
            raise RuntimeError("oracle found two distinct complementarity solutions")
        found = u
    if found is None:
        raise RuntimeError("oracle found no complementarity solution; inconsistent data")
    return ScalarField(grid, found)


def _penalized_newton(matrix, f, psi, eps, grid, config, u0=None) -> np.ndarray:
    """Semismooth Newton on M u + (u - psi)^+ / eps = f.

    The active-set linearization converges in finitely many steps for
    M-matrices; a damped fixed-point fallback guards stagnation.
    """
    n = len(f)
    u = _linsolve(matrix, f, grid) if u0 is None else np.array(u0, dtype=float, copy=True)

    def residual(v):
        return float(np.max(np.abs(matrix @ v + np.maximum(v - psi, 0.0) / eps - f)))

    res = residual(u)
    best = res
    stall = 0
    for _ in range(200):
        if res <= config.tol:
            return u
        active = u - psi > 0
        jac = (matrix + sp.diags(active.astype(float) / eps)).tocsr()
        u_new = _linsolve(jac, f + (psi / eps) * active, grid)
        res_new = residual(u_new)
        if res_new < best:
            best, stall = res_new, 0
            u, res = u_new, res_new
        else:
            stall += 1
            u = 0.5 * (u + u_new)
            res = residual(u)
            if stall > 25:
                break
    if res <= config.tol:
        return u
    raise ObstacleConvergenceError("penalized Newton did not converge", res, 200)


def solve_obstacle_penalized(
    source: ScalarField,
    obstacle: ScalarField,
    epsilon: float,
    config: ObstacleSolveConfig | None = None,
    with_zero_order: bool = True,
    u0: ScalarField | None = None,
    matrix=None,
) -> ScalarField:
    """Solve the penalized problem M u + (u - psi)^+ / eps = f."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    config = config or ObstacleSolveConfig()
    grid = source.grid
    if obstacle.grid != grid:
        raise ValueError("source and obstacle must share one grid")
    m = elliptic_matrix(grid, with_zero_order) if matrix is None else matrix
    start = None if u0 is None else u0.values
    u = _penalized_newton(m, source.values, obstacle.values, epsilon, grid, config, start)
    return ScalarField(grid, u)


def solve_obstacle_parabolic(
    source: FieldTrajectory,
    obstacle: FieldTrajectory,
    terminal: ScalarField,
    timegrid: TimeGrid,
    config: ObstacleSolveConfig | None = None,
    with_zero_order: bool = False,
) -> FieldTrajectory:
    """Backward implicit Euler for max(-du/dt - lap u - f, u - psi) = 0.

    Each step solves a stationary obstacle problem with operator
    B = id/dt - lap (plus id when with_zero_order) and source
    u_{k+1}/dt + f_k. The terminal slice must equal psi at t = T.
    """
    config = config or ObstacleSolveConfig()
    grid = source.grid
    if obstacle.grid != grid or terminal.grid != grid:
        raise ValueError("trajectories must share one grid")
    if source.timegrid != timegrid or obstacle.timegrid != timegrid:
        raise ValueError("trajectories must live on the given timegrid")
    psi_end = obstacle.slices[-1].values
    if np.max(np.abs(terminal.values - psi_end)) > 1e-12:
        raise ValueError("terminal slice must equal the obstacle at t = T")
    dt = timegrid.dt
    b = (elliptic_matrix(grid, with_zero_order=with_zero_order)
         + sp.identity(grid.n_total, format="csr") / dt).tocsr()
    slices = [None] * (timegrid.n_steps + 1)
    slices[-1] = terminal
    u_next = terminal.values
    for k in range(timegrid.n_steps - 1, -1, -1):
        rhs = u_next / dt + source.slices[k].values
        u_k = _psor(b, rhs, obstacle.slices[k].values, u_next, grid, config)
        slices[k] = ScalarField(grid, u_k)
        u_next = u_k
    return FieldTrajectory(timegrid, tuple(slices))
