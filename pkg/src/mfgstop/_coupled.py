"""Shared solver for the time-dependent coupled systems.

The penalized forward-backward system is solved by a semismooth Newton
method on the joint space-time unknowns (value trajectory, density
trajectory), with the exit rate realized as a continuous ramp across
the classification band (a concrete selection of the free interior
alpha). Solving the pair jointly is what keeps contact plateaus
stable; split forward/backward sweeps flap on the free-boundary
classification.

Data that enters nonsmoothly or nonlocally, namely the m-dependent
obstacle psi(m) and its source, the Hamiltonian value at the upwind
gradient, and the induced face drift, is frozen per outer pass and
relaxed by iteration (lagged evaluation); fixed points are unchanged.

Discrete pairing conventions (they close the duality identity exactly,
see the verifiers): the value equation at slice k uses source f(m_k)
for k = 0..K-1; the density step k -> k+1 uses the exit rate ramped
from slice k; time integrals pair slice-k integrands with m_{k+1}.

The controlled system is the same solver with a Hamiltonian term and
its induced drift; with H = 0 the code path is identical to the plain
evolutive one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .costs import CostOperator
from .density import FaceVelocities, drift_divergence_matrix
from .grid import FieldTrajectory, Grid, ScalarField, TimeGrid, elliptic_matrix
from .stationary import CoupledConfig, CoupledNonConvergence, _ramp

__all__ = ["FBSolution", "forward_backward_solve", "forward_backward_continuation"]


@dataclass(frozen=True, eq=False)
class FBSolution:
    """Trajectories of one penalized forward-backward solve."""

    u: FieldTrajectory
    m: FieldTrajectory
    alpha: FieldTrajectory
    drift: tuple[FaceVelocities, ...] | None
    epsilon: float
    iterations: int
    residual_history: list[float]
    delta_band: float
    converged: bool = True


def _node_gradients(grid: Grid, u: np.ndarray):
    """Per-axis forward and backward differences with Dirichlet closure."""
    shaped = u.reshape(grid.shape)
    fwd, bwd = [], []
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        padded = np.concatenate(
            [np.zeros_like(np.take(shaped, [0], axis=axis)),
             shaped,
             np.zeros_like(np.take(shaped, [0], axis=axis))], axis=axis)
        n = grid.shape[axis]
        centre = np.take(padded, range(1, n + 1), axis=axis)
        right = np.take(padded, range(2, n + 2), axis=axis)
        left = np.take(padded, range(0, n), axis=axis)
        fwd.append(((right - centre) / h).ravel())
        bwd.append(((centre - left) / h).ravel())
    return fwd, bwd


def _upwind_hamiltonian(grid: Grid, hamiltonian, u: np.ndarray, n_passes: int = 4):
    """Upwind nodal H(x, Du): difference choice follows the sign of D_pH.

    The selection is iterated to a fixed point from p = 0 so that the
    solver and the verifier resolve it identically.
    """
    fwd, bwd = _node_gradients(grid, u)
    p = [np.zeros(grid.n_total) for _ in range(grid.dim)]
    for _ in range(n_passes):
        v = hamiltonian.gradient(p)
        p_new = [np.where(v[a] > 0, bwd[a], fwd[a]) for a in range(grid.dim)]
        if all(np.array_equal(p_new[a], p[a]) for a in range(grid.dim)):
            p = p_new
            break
        p = p_new
    return hamiltonian.value(p), p


def _face_drift(grid: Grid, hamiltonian, u: np.ndarray) -> FaceVelocities:
    """D_pH(x, grad u) on faces; normal part from the face difference,
    transverse part (2D) averaged from nodal central differences."""
    shaped = u.reshape(grid.shape)
    comps = []
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        padded = np.concatenate(
            [np.zeros_like(np.take(shaped, [0], axis=axis)),
             shaped,
             np.zeros_like(np.take(shaped, [0], axis=axis))], axis=axis)
        n = grid.shape[axis]
        upper = np.take(padded, range(1, n + 2), axis=axis)
        lower = np.take(padded, range(0, n + 1), axis=axis)
        p_face = [None] * grid.dim
        p_face[axis] = (upper - lower) / h
        for other in range(grid.dim):
            if other == axis:
                continue
            ho = grid.spacing[other]
            pad_o = np.concatenate(
                [np.zeros_like(np.take(shaped, [0], axis=other)),
                 shaped,
                 np.zeros_like(np.take(shaped, [0], axis=other))], axis=other)
            no = grid.shape[other]
            central = (np.take(pad_o, range(2, no + 2), axis=other)
                       - np.take(pad_o, range(0, no), axis=other)) / (2 * ho)
            pad_c = np.concatenate(
                [np.take(central, [0], axis=axis), central,
                 np.take(central, [-1], axis=axis)], axis=axis)
            p_face[other] = 0.5 * (np.take(pad_c, range(0, n + 1), axis=axis)
                                   + np.take(pad_c, range(1, n + 2), axis=axis))
        beta_face = hamiltonian.face_weight(grid, axis)
        grad = hamiltonian.gradient(p_face, weight=beta_face)
        comps.append(grad[axis])
    return FaceVelocities(grid, tuple(comps))


def _apply_obstacle(obstacle_op, grid, timegrid, m_arr):
    """psi(m) and its source (d/dt + lap) psi as (K+1, N) arrays."""
    steps = timegrid.n_steps
    n = grid.n_total
    if obstacle_op is None:
        return np.zeros((steps + 1, n)), np.zeros((steps + 1, n))
    return obstacle_op.apply_arrays(grid, timegrid, m_arr)


def forward_backward_solve(
    cost: CostOperator,
    m0: ScalarField,
    timegrid: TimeGrid,
    epsilon: float,
    config: CoupledConfig | None = None,
    obstacle_op=None,
    hamiltonian=None,
    m_traj_init: np.ndarray | None = None,
    u_traj_init: np.ndarray | None = None,
    band_init: float | None = None,
    strict: bool = True,
) -> FBSolution:
    """Solve the penalized forward-backward system at one penalty level.

    Outer passes freeze the obstacle trajectory, the Hamiltonian value
    and the face drift from the current iterate, then a joint
    semismooth Newton resolves the frozen system in the stacked
    unknowns (u_0..u_{K-1}, m_1..m_K). Local costs only; nonlocal
    couplings have no nodal derivative for the Newton blocks.

    strict=False returns the best iterate instead of raising when a
    warm-up continuation stage stalls.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not cost.is_local:
        raise ValueError("time-dependent solvers require a local cost operator")
    cfg = config or CoupledConfig()
    grid = m0.grid
    if np.any(m0.values < -1e-12):
        raise ValueError("m0 must be nonnegative")
    n = grid.n_total
    steps = timegrid.n_steps
    dt = timegrid.dt
    a0 = elliptic_matrix(grid, with_zero_order=False)

    m_arr = (np.tile(m0.values, (steps + 1, 1)) if m_traj_init is None
             else np.array(m_traj_init, dtype=float, copy=True))
    m_arr[0] = m0.values
    psi_arr, g_arr = _apply_obstacle(obstacle_op, grid, timegrid, m_arr)
    if u_traj_init is None:
        u_arr = psi_arr.copy()
    else:
        u_arr = np.array(u_traj_init, dtype=float, copy=True)
    history: list[float] = []
    band = cfg.delta_floor
    best = None
    best_gap = np.inf
    outer_iters = 0

    for outer in range(1, cfg.max_outer + 1):
        outer_iters = outer
        # freeze nonlocal / nonsmooth data from the current iterate
        psi_arr, g_arr = _apply_obstacle(obstacle_op, grid, timegrid, m_arr)
        u_arr[steps] = psi_arr[steps]
        f_arr = np.stack([cost.evaluate(m_arr[k]) for k in range(steps + 1)])
        h_shift = hamiltonian.at_zero() if hamiltonian is not None else None
        scale = 0.0
        for k in range(steps):
            ft = f_arr[k] + g_arr[k]
            if h_shift is not None:
                ft = ft - h_shift
            scale = max(scale, float(np.max(np.abs(ft))))
        band_new = (cfg.band_override if cfg.band_override is not None
                    else max(cfg.delta_floor, cfg.band_factor * epsilon * scale))
        if outer == 1 and u_traj_init is not None and band_init:
            # keep the ramp position (hence the exit rate) continuous
            # across penalty stages
            inside = np.abs(u_arr[:steps] - psi_arr[:steps]) <= band_init
            u_arr[:steps] = np.where(
                inside, psi_arr[:steps] + (u_arr[:steps] - psi_arr[:steps]) * (band_new / band_init),
                u_arr[:steps])
        band = band_new
        if hamiltonian is not None:
            h_vals = np.stack([_upwind_hamiltonian(grid, hamiltonian, u_arr[k])[0]
                               for k in range(steps)])
            drift = [_face_drift(grid, hamiltonian, u_arr[k]) for k in range(steps)]
            div_ops = [drift_divergence_matrix(grid, d) for d in drift]
        else:
            h_vals = np.zeros((steps, n))
            drift = None
            div_ops = [None] * steps

        u_new, m_new, newton_res = _newton_frozen(
            cost, m0.values, u_arr, m_arr, psi_arr, f_arr, h_vals, div_ops,
            a0, dt, steps, epsilon, band, grid, cfg)
        gap = max(float(np.max(np.abs(m_new - m_arr))), float(np.max(np.abs(u_new - u_arr))))
        history.append(gap)
        u_arr = u_new
        m_arr = m_new

        def solution(converged):
            rate = _ramp((u_arr[:steps] - psi_arr[:steps]) / band) / epsilon
            alpha = np.vstack([rate * epsilon, rate[-1:] * epsilon])
            return FBSolution(
                u=FieldTrajectory.from_array(grid, timegrid, u_arr),
                m=FieldTrajectory.from_array(grid, timegrid, m_arr),
                alpha=FieldTrajectory.from_array(grid, timegrid, np.clip(alpha, 0.0, 1.0)),
                drift=None if drift is None else tuple(drift),
                epsilon=epsilon,
                iterations=outer,
                residual_history=list(history),
                delta_band=band,
                converged=converged,
            )

        if gap <= cfg.tol_outer and newton_res <= cfg.tol_pde:
            return solution(True)
        if gap < best_gap:
            best_gap = gap
            best = solution(False)
    if strict:
        raise CoupledNonConvergence("forward-backward solve did not converge", history)
    return best


def _newton_frozen(cost, m0_vals, u_arr, m_arr, psi_arr, f_arr, h_vals, div_ops,
                   a0, dt, steps, epsilon, band, grid, cfg):
    """Joint semismooth Newton on the frozen forward-backward system.

    Unknowns x = [u_0..u_{K-1}, m_1..m_K]. The value equations carry
    the penalty (u - psi)^+/eps and frozen Hamiltonian values; the
    density equations carry the ramped exit rate and frozen drift.
    """
    n = grid.n_total
    k_steps = steps
    u = np.array(u_arr[:steps], dtype=float)
    m = np.array(m_arr[1:], dtype=float)
    u_terminal = u_arr[steps]
    eye_dt = sp.identity(n, format="csr") / dt
    b_op = (a0 + eye_dt).tocsr()

    def m_at(k):
        # m slice k as data (k = 0) or unknown (k >= 1)
        return m0_vals if k == 0 else m[k - 1]

    def residual(u_loc, m_loc):
        def m_of(k):
            return m0_vals if k == 0 else m_loc[k - 1]
        r_u = np.empty((k_steps, n))
        r_m = np.empty((k_steps, n))
        for k in range(k_steps):
            u_next = u_terminal if k == k_steps - 1 else u_loc[k + 1]
            v_k = u_loc[k] - psi_arr[k]
            r_u[k] = (b_op @ u_loc[k] - u_next / dt
                      + np.maximum(v_k, 0.0) / epsilon + h_vals[k]
                      - cost.evaluate(m_of(k)))
            op = b_op if div_ops[k] is None else b_op + div_ops[k]
            rate = _ramp(v_k / band) / epsilon
            r_m[k] = op @ m_of(k + 1) - m_of(k) / dt + rate * m_of(k + 1)
        return r_u, r_m

    r_u, r_m = residual(u, m)
    norm = max(float(np.max(np.abs(r_u))), float(np.max(np.abs(r_m))))
    target = min(cfg.tol_pde, 1e-10) * (1.0 + float(np.max(np.abs(f_arr))))
    for _ in range(60):
        if norm <= target:
            break
        blocks_u = [[None] * (2 * k_steps) for _ in range(k_steps)]
        blocks_m = [[None] * (2 * k_steps) for _ in range(k_steps)]
        for k in range(k_steps):
            v_k = u[k] - psi_arr[k]
            blocks_u[k][k] = b_op + sp.diags((v_k > 0).astype(float) / epsilon)
            if k + 1 < k_steps:
                blocks_u[k][k + 1] = -eye_dt
            if k >= 1:
                blocks_u[k][k_steps + k - 1] = sp.diags(-cost.derivative(m_at(k)))
            op = b_op if div_ops[k] is None else b_op + div_ops[k]
            sigma = _ramp(v_k / band)
            dsigma = np.where(np.abs(v_k) < band, 0.5 / band, 0.0)
            blocks_m[k][k_steps + k] = op + sp.diags(sigma / epsilon)
            if k >= 1:
                blocks_m[k][k_steps + k - 1] = -eye_dt
            blocks_m[k][k] = sp.diags(dsigma * m_at(k + 1) / epsilon)
        jac = sp.bmat(blocks_u + blocks_m, format="csc")
        rhs = -np.concatenate([r_u.ravel(), r_m.ravel()])
        step = sp.linalg.spsolve(jac, rhs)
        du = step[: k_steps * n].reshape(k_steps, n)
        dm = step[k_steps * n:].reshape(k_steps, n)
        tau = 1.0
        for _ls in range(50):
            u_try = u + tau * du
            m_try = m + tau * dm
            r_u_try, r_m_try = residual(u_try, m_try)
            norm_try = max(float(np.max(np.abs(r_u_try))), float(np.max(np.abs(r_m_try))))
            if norm_try <= (1.0 - 1e-4 * tau) * norm or norm_try <= target:
                break
            tau *= 0.5
        u, m, r_u, r_m, norm = u_try, m_try, r_u_try, r_m_try, norm_try
        if tau < 1e-12:
            break
    u_out = np.vstack([u, u_terminal[None, :]])
    m_out = np.vstack([m0_vals[None, :], m])
    return u_out, m_out, norm


def forward_backward_continuation(
    cost: CostOperator,
    m0: ScalarField,
    timegrid: TimeGrid,
    eps_schedule,
    config: CoupledConfig | None = None,
    obstacle_op=None,
    hamiltonian=None,
    m_traj_init: np.ndarray | None = None,
):
    """Warm-started penalized solves along a decreasing penalty schedule.

    The classification-band position of the value (hence the exit rate)
    is kept continuous across stages. Returns (solution, stage list).
    """
    schedule = list(eps_schedule)
    if not schedule:
        raise ValueError("eps schedule must not be empty")
    if any(e2 >= e1 for e1, e2 in zip(schedule, schedule[1:])):
        raise ValueError("eps schedule must be strictly decreasing")
    sol = None
    stages = []
    m_init = m_traj_init
    u_init = None
    band_prev = None
    for j, eps in enumerate(schedule):
        if sol is not None:
            m_init = sol.m.array()
            u_init = sol.u.array()
            band_prev = sol.delta_band
        final = j == len(schedule) - 1
        try:
            sol = forward_backward_solve(
                cost, m0, timegrid, eps, config,
                obstacle_op=obstacle_op, hamiltonian=hamiltonian,
                m_traj_init=m_init, u_traj_init=u_init, band_init=band_prev,
                strict=final,
            )
        except CoupledNonConvergence as err:
            raise CoupledNonConvergence(str(err), err.residual_history, stage=j) from err
        stages.append(sol)
    return sol, stages
