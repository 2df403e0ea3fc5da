"""Density-side solvers: the exclusion-set elliptic equation, penalized
killing-potential solves, the drifted forward equation by implicit Euler
with conservative upwind fluxes, and the subsolution slack check.

All system matrices are M-matrices, so every produced density is
nonnegative (up to roundoff) and total mass is non-increasing in time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .grid import (
    FieldTrajectory,
    Grid,
    NodeMask,
    ScalarField,
    TimeGrid,
    elliptic_matrix,
)
from .obstacle import _linsolve

__all__ = [
    "KillingData",
    "FaceVelocities",
    "solve_density_on_set",
    "solve_density_penalized",
    "check_subsolution",
    "solve_density_parabolic",
    "drift_divergence_matrix",
]


@dataclass(frozen=True, eq=False)
class KillingData:
    """Exit-rate data: rate alpha/epsilon acts on the active node set."""

    alpha: ScalarField
    active: NodeMask
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.alpha.grid != self.active.grid:
            raise ValueError("alpha and active mask must share one grid")
        v = self.alpha.values
        if np.any(v < -1e-15) or np.any(v > 1 + 1e-15):
            raise ValueError("alpha must take values in [0, 1]")

    def rate(self) -> np.ndarray:
        """Nodal killing rate alpha/epsilon, zero off the active set."""
        return np.where(self.active.mask, self.alpha.values / self.epsilon, 0.0)


@dataclass(frozen=True, eq=False)
class FaceVelocities:
    """Per-axis velocities on cell faces (including boundary faces).

    Axis k carries an array shaped like the grid with axis k extended by
    one: faces between consecutive nodes plus the two boundary faces.
    """

    grid: Grid
    components: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.components) != self.grid.dim:
            raise ValueError("one component per axis required")
        comps = []
        for axis, comp in enumerate(self.components):
            shape = list(self.grid.shape)
            shape[axis] += 1
            c = np.array(comp, dtype=float, copy=True)
            if c.shape != tuple(shape):
                raise ValueError(f"axis {axis} faces must have shape {tuple(shape)}, got {c.shape}")
            c.setflags(write=False)
            comps.append(c)
        object.__setattr__(self, "components", tuple(comps))

    @staticmethod
    def zeros(grid: Grid) -> "FaceVelocities":
        comps = []
        for axis in range(grid.dim):
            shape = list(grid.shape)
            shape[axis] += 1
            comps.append(np.zeros(tuple(shape)))
        return FaceVelocities(grid, tuple(comps))


def _require_nonnegative(values: np.ndarray, what: str) -> None:
    if np.any(values < -1e-12):
        raise ValueError(f"{what} must be nonnegative, min = {values.min():.3e}")


def solve_density_on_set(omega: NodeMask, source: ScalarField, with_zero_order: bool = True) -> ScalarField:
    """Solve (-lap + id) m = rho on omega with m = 0 elsewhere.

    Off-set nodes are eliminated exactly (not penalized), so m = 0 there
    holds to machine precision.
    """
    grid = source.grid
    if omega.grid != grid:
        raise ValueError("mask and source must share one grid")
    _require_nonnegative(source.values, "rho")
    m = np.zeros(grid.n_total)
    idx = np.flatnonzero(omega.mask)
    if idx.size:
        a = elliptic_matrix(grid, with_zero_order).tocsc()
        sub = a[np.ix_(idx, idx)].tocsc()
        m[idx] = np.atleast_1d(sp.linalg.spsolve(sub, source.values[idx]))
    return ScalarField(grid, m)


def solve_density_penalized(killing: KillingData, source: ScalarField, with_zero_order: bool = True) -> ScalarField:
    """Solve (-lap + id + diag(alpha/eps on active)) m = rho."""
    grid = source.grid
    if killing.alpha.grid != grid:
        raise ValueError("killing data and source must share one grid")
    _require_nonnegative(source.values, "rho")
    a = elliptic_matrix(grid, with_zero_order) + sp.diags(killing.rate())
    return ScalarField(grid, _linsolve(a.tocsr(), source.values, grid))


def check_subsolution(m: ScalarField, source: ScalarField, with_zero_order: bool = True) -> ScalarField:
    """Slack rho - (-lap + id) m; nonnegative slack certifies a subsolution."""
    if m.grid != source.grid:
        raise ValueError("fields must share one grid")
    a = elliptic_matrix(m.grid, with_zero_order)
    return ScalarField(m.grid, source.values - a @ m.values)


def drift_divergence_matrix(grid: Grid, faces: FaceVelocities) -> sp.csr_matrix:
    """Matrix of m -> -div(m b) with conservative upwind face fluxes.

    The flux through a face with velocity b takes m from the side the
    mass moves away from, so off-diagonal entries stay nonpositive and
    column sums telescope to boundary outflow only (mass can only leak).
    """
    if faces.grid != grid:
        raise ValueError("faces must live on the grid")
    n_total = grid.n_total
    rows, cols, vals = [], [], []
    flat = np.arange(n_total).reshape(grid.shape)

    def axis_slice(axis, s):
        sl = [slice(None)] * grid.dim
        sl[axis] = s
        return tuple(sl)

    for axis in range(grid.dim):
        h = grid.spacing[axis]
        n_axis = grid.shape[axis]
        b = faces.components[axis]
        bp = np.maximum(b, 0.0)
        bm = np.minimum(b, 0.0)
        # interior faces (indices 1..n-1): between left node L and right node R
        left = flat[axis_slice(axis, slice(0, n_axis - 1))].ravel()
        right = flat[axis_slice(axis, slice(1, n_axis))].ravel()
        fp = bp[axis_slice(axis, slice(1, n_axis))].ravel()
        fm = bm[axis_slice(axis, slice(1, n_axis))].ravel()
        # flux F = b+ m_R + b- m_L enters row L as -F/h and row R as +F/h
        rows += [left, left, right, right]
        cols += [right, left, right, left]
        vals += [-fp / h, -fm / h, fp / h, fm / h]
        # boundary faces: the outside value is 0, only outflow terms remain
        first_nodes = flat[axis_slice(axis, slice(0, 1))].ravel()
        last_nodes = flat[axis_slice(axis, slice(n_axis - 1, n_axis))].ravel()
        b_first = bp[axis_slice(axis, slice(0, 1))].ravel()
        b_last = bm[axis_slice(axis, slice(n_axis, n_axis + 1))].ravel()
        rows += [first_nodes, last_nodes]
        cols += [first_nodes, last_nodes]
        vals += [b_first / h, -b_last / h]

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_total, n_total))


def _step_killing(killing_traj, k: int):
    if killing_traj is None:
        return None
    if isinstance(killing_traj, KillingData):
        return killing_traj
    return killing_traj[k]


def _step_drift(drift_traj, k: int):
    if drift_traj is None:
        return None
    if isinstance(drift_traj, FaceVelocities):
        return drift_traj
    return drift_traj[k]


def solve_density_parabolic(
    m0: ScalarField,
    killing_traj: Sequence[KillingData] | KillingData | None,
    timegrid: TimeGrid,
    drift_traj: Sequence[FaceVelocities] | FaceVelocities | None = None,
) -> FieldTrajectory:
    """Forward implicit Euler for dm/dt - lap m + V m - div(m b) = 0.

    killing_traj / drift_traj give per-step data (step k advances slice k
    to k+1); a single object means time-constant data. Implicit stepping
    is unconditionally stable and preserves nonnegativity.
    """
    grid = m0.grid
    _require_nonnegative(m0.values, "m0")
    dt = timegrid.dt
    base = (elliptic_matrix(grid, with_zero_order=False)
            + sp.identity(grid.n_total, format="csr") / dt).tocsr()
    slices = [m0]
    m = m0.values
    for k in range(timegrid.n_steps):
        mat = base
        kd = _step_killing(killing_traj, k)
        if kd is not None:
            mat = mat + sp.diags(kd.rate())
        dv = _step_drift(drift_traj, k)
        if dv is not None:
            mat = mat + drift_divergence_matrix(grid, dv)
        m = _linsolve(mat.tocsr(), m / dt, grid)
        slices.append(ScalarField(grid, m))
    return FieldTrajectory(timegrid, tuple(slices))
