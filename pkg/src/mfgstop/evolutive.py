"""The time-dependent system with m-dependent obstacles: obstacle
operators (fixed trajectories, or obstacles generated from a local
source by the backward heat equation), the forward-backward penalized
solver, and the evolutive mixed-solution verifier.

For obstacles built from a source g, the quantity (d/dt + lap) psi(m)
is returned as g(m) exactly rather than by differencing psi, so the
contact-zone integrand f(m) + (d/dt + lap) psi(m) carries no extra
discretization error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._coupled import FBSolution, forward_backward_continuation, forward_backward_solve
from .costs import CostOperator
from .grid import (
    DELTA_C_FLOOR,
    FieldTrajectory,
    Grid,
    ScalarField,
    TimeGrid,
    elliptic_matrix,
)
from .obstacle import _linsolve
from .stationary import CoupledConfig

__all__ = [
    "ObstacleOperator",
    "EvolutiveMixedReport",
    "apply_obstacle_operator",
    "osmfg_penalized_solve",
    "osmfg_continuation",
    "verify_mixed_evolutive",
    "evolutive_uniqueness_probe",
]


@dataclass(frozen=True, eq=False)
class ObstacleOperator:
    """Obstacle as a fixed trajectory or as the backward-heat image of a
    local source g(m) with terminal and boundary values zero."""

    kind: str  # "constant_field" | "heat_from_g"
    psi: FieldTrajectory | None = None
    g_cost: CostOperator | None = None

    def __post_init__(self):
        if self.kind not in ("constant_field", "heat_from_g"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.kind == "constant_field" and self.psi is None:
            raise ValueError("constant_field obstacle needs a trajectory")
        if self.kind == "heat_from_g":
            if self.g_cost is None:
                raise ValueError("heat_from_g obstacle needs a source cost")
            if not self.g_cost.is_local:
                raise ValueError("obstacle sources must be local costs")

    @staticmethod
    def constant(psi: FieldTrajectory) -> "ObstacleOperator":
        return ObstacleOperator(kind="constant_field", psi=psi)

    @staticmethod
    def zero(grid: Grid, timegrid: TimeGrid) -> "ObstacleOperator":
        return ObstacleOperator(kind="constant_field",
                                psi=FieldTrajectory.constant(grid, timegrid, 0.0))

    @staticmethod
    def heat_source(g_cost: CostOperator) -> "ObstacleOperator":
        return ObstacleOperator(kind="heat_from_g", g_cost=g_cost)

    def apply_arrays(self, grid: Grid, timegrid: TimeGrid, m_arr: np.ndarray):
        """(psi, g_psi) as (K+1, N) arrays; see apply_obstacle_operator."""
        steps = timegrid.n_steps
        dt = timegrid.dt
        a0 = elliptic_matrix(grid, with_zero_order=False)
        if self.kind == "heat_from_g":
            g_arr = np.stack([self.g_cost.evaluate(m_arr[k]) for k in range(steps + 1)])
            psi_arr = np.zeros_like(m_arr)
            solver_matrix = (a0 + sp.identity(grid.n_total, format="csr") / dt).tocsr()
            for k in range(steps - 1, -1, -1):
                psi_arr[k] = _linsolve(solver_matrix, psi_arr[k + 1] / dt - g_arr[k], grid)
            return psi_arr, g_arr
        psi_arr = self.psi.array()
        if psi_arr.shape != m_arr.shape:
            raise ValueError("fixed obstacle trajectory does not match the timegrid/grid")
        g_arr = np.empty_like(psi_arr)
        for k in range(steps):
            g_arr[k] = (psi_arr[k + 1] - psi_arr[k]) / dt - a0 @ psi_arr[k]
        g_arr[steps] = (psi_arr[steps] - psi_arr[steps - 1]) / dt - a0 @ psi_arr[steps]
        return psi_arr, g_arr


def apply_obstacle_operator(op: ObstacleOperator, m: FieldTrajectory):
    """Evaluate (psi(m), (d/dt + lap) psi(m)) on a density trajectory.

    heat_from_g integrates d psi/dt = -lap psi + g(m) backward from
    psi(T) = 0 by implicit Euler and returns the source g(m) itself as
    the second component (no differencing). constant_field returns the
    stored trajectory and its discrete (d/dt + lap) image.
    """
    if op.kind == "heat_from_g" and np.any(m.array() < -1e-12):
        raise ValueError("density trajectory must be nonnegative")
    psi_arr, g_arr = op.apply_arrays(m.grid, m.timegrid, m.array())
    return (FieldTrajectory.from_array(m.grid, m.timegrid, psi_arr),
            FieldTrajectory.from_array(m.grid, m.timegrid, g_arr))


@dataclass(frozen=True)
class EvolutiveMixedReport:
    """Residuals of the evolutive mixed-solution conditions."""

    r_obstacle: float
    r_continuation: float
    r_subsolution: float
    r_contact: float
    r_duality: float
    r_terminal: float
    r_initial: float
    delta_c: float
    grid: dict

    @property
    def max_residual(self) -> float:
        return max(self.r_obstacle, self.r_continuation, self.r_subsolution,
                   self.r_contact, self.r_duality, self.r_terminal, self.r_initial)

    def to_dict(self) -> dict:
        return {
            "r_obstacle": self.r_obstacle,
            "r_continuation": self.r_continuation,
            "r_subsolution": self.r_subsolution,
            "r_contact": self.r_contact,
            "r_duality": self.r_duality,
            "r_terminal": self.r_terminal,
            "r_initial": self.r_initial,
            "delta_c": self.delta_c,
            "grid": self.grid,
        }


def osmfg_penalized_solve(
    cost: CostOperator,
    obstacle_op: ObstacleOperator,
    m0: ScalarField,
    timegrid: TimeGrid,
    epsilon: float,
    config: CoupledConfig | None = None,
    m_traj_init: np.ndarray | None = None,
) -> FBSolution:
    """One penalized forward-backward solve of the evolutive system."""
    return forward_backward_solve(
        cost, m0, timegrid, epsilon, config,
        obstacle_op=obstacle_op, m_traj_init=m_traj_init,
    )


def osmfg_continuation(
    cost: CostOperator,
    obstacle_op: ObstacleOperator,
    m0: ScalarField,
    timegrid: TimeGrid,
    eps_schedule=None,
    config: CoupledConfig | None = None,
    m_traj_init: np.ndarray | None = None,
):
    """Penalty continuation for the evolutive system.

    Returns (solution, stage_reports) where each stage report pairs the
    penalty level with the verifier output for that stage's solution.
    """
    from .stationary import default_eps_schedule

    schedule = list(eps_schedule) if eps_schedule is not None else default_eps_schedule()
    sol, stages = forward_backward_continuation(
        cost, m0, timegrid, schedule, config,
        obstacle_op=obstacle_op, m_traj_init=m_traj_init,
    )
    reports = []
    for j, stage_sol in enumerate(stages):
        rep = verify_mixed_evolutive(stage_sol.u, stage_sol.m, cost, obstacle_op, m0,
                                     delta_c=stage_sol.delta_band)
        reports.append({"stage": j, "epsilon": schedule[j],
                        "iterations": stage_sol.iterations, "report": rep})
    return sol, reports


def verify_mixed_evolutive(
    u: FieldTrajectory,
    m: FieldTrajectory,
    cost: CostOperator,
    obstacle_op: ObstacleOperator,
    m0: ScalarField,
    delta_c: float | None = None,
) -> EvolutiveMixedReport:
    """Residuals of every evolutive mixed-solution condition.

    Discrete operators mirror the solver: backward differences in time
    for the value, forward implicit steps for the density, slice-k
    integrands paired with m_{k+1}. The duality residual is
    |sum_k dt <f(m_k) + g_k, m_{k+1}> - <u_0 - psi_0, m_0>|.
    """
    grid = u.grid
    timegrid = u.timegrid
    steps = timegrid.n_steps
    dt = timegrid.dt
    if m.timegrid != timegrid or m.grid != grid:
        raise ValueError("u and m must share grid and timegrid")
    a0 = elliptic_matrix(grid, with_zero_order=False)
    u_arr = u.array()
    m_arr = m.array()
    psi_arr, g_arr = obstacle_op.apply_arrays(grid, timegrid, m_arr)
    f_arr = np.stack([cost.evaluate(m_arr[k]) for k in range(steps + 1)])
    if delta_c is None:
        gap = float(np.max(np.abs(u_arr - psi_arr), initial=0.0))
        delta_c = max(DELTA_C_FLOOR, 1e-8 * gap)
    vol = grid.cell_volume

    r_obstacle = 0.0
    r_cont = 0.0
    r_sub = 0.0
    contact_sum = 0.0
    duality_sum = 0.0
    for k in range(steps):
        lu = (u_arr[k] - u_arr[k + 1]) / dt + a0 @ u_arr[k]
        comp = np.minimum(psi_arr[k] - u_arr[k], f_arr[k] - lu)
        r_obstacle = max(r_obstacle, float(np.max(np.abs(comp))))
        fp_resid = (m_arr[k + 1] - m_arr[k]) / dt + a0 @ m_arr[k + 1]
        v_k = u_arr[k] - psi_arr[k]
        continuation = v_k < -delta_c
        contact = ~continuation
        r_cont = max(r_cont, float(np.max(np.abs(fp_resid[continuation]), initial=0.0)))
        r_sub = max(r_sub, float(np.max(fp_resid, initial=0.0)))
        integrand = (f_arr[k] + g_arr[k]) * m_arr[k + 1]
        contact_sum += dt * float(np.sum(integrand[contact])) * vol
        duality_sum += dt * float(np.sum(integrand)) * vol
    r_terminal = float(np.max(np.abs(u_arr[steps] - psi_arr[steps])))
    r_initial = float(np.max(np.abs(m_arr[0] - m0.values)))
    duality_gap = duality_sum - float(np.dot(u_arr[0] - psi_arr[0], m0.values)) * vol
    return EvolutiveMixedReport(
        r_obstacle=r_obstacle,
        r_continuation=r_cont,
        r_subsolution=max(r_sub, 0.0),
        r_contact=abs(contact_sum),
        r_duality=abs(duality_gap),
        r_terminal=r_terminal,
        r_initial=r_initial,
        delta_c=float(delta_c),
        grid=grid.metadata(),
    )


def evolutive_uniqueness_probe(
    cost: CostOperator,
    obstacle_op: ObstacleOperator,
    m0: ScalarField,
    timegrid: TimeGrid,
    n_starts: int = 3,
    seed: int = 0,
    eps_schedule=None,
    config: CoupledConfig | None = None,
    start_scales=None,
) -> float:
    """Max pairwise trajectory gap over continuation runs with scaled
    initial density-trajectory guesses (m0 itself stays fixed)."""
    if n_starts < 2:
        raise ValueError("need at least two starts")
    if start_scales is None:
        rng = np.random.default_rng(seed)
        scales = rng.uniform(0.0, 2.0, n_starts)
    else:
        scales = np.asarray(start_scales, dtype=float)
        if len(scales) != n_starts:
            raise ValueError("start_scales must have n_starts entries")
    results = []
    for s in scales:
        init = np.tile(m0.values, (timegrid.n_steps + 1, 1)) * s
        init[0] = m0.values
        sol, _ = osmfg_continuation(cost, obstacle_op, m0, timegrid,
                                    eps_schedule, config, m_traj_init=init)
        results.append(sol.m.array())
    gap = 0.0
    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            gap = max(gap, float(np.max(np.abs(results[i] - results[j]))))
    return gap
