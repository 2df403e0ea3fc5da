"""The coupled stationary system: penalized solves with an exit-rate dual
variable, continuation in the penalty parameter, ordered fixed-point
iteration for anti-monotone costs, the relaxed variational problem, a
multi-start uniqueness probe, and the mixed-solution verifier.

A mixed solution couples an obstacle problem for the value u with a
density m that solves the source equation on the continuation set
{u < 0}, stays a subsolution everywhere, and carries no cost mass on
the contact set (sum of f(m) m there vanishes). The certificate
<f(m), m> = <u, rho> ties the two sides together and is reported as
r_duality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .costs import ANTI_MONOTONE, STRICT_MONOTONE, CostOperator, PotentialOperator
from .density import solve_density_on_set
from .grid import (
    DELTA_C_FLOOR,
    NodeMask,
    ScalarField,
    classify_nodes,
    elliptic_matrix,
    inner,
)
from .obstacle import (
    ObstacleSolveConfig,
    _linsolve,
    _penalized_newton,
    solve_obstacle_stationary,
)

__all__ = [
    "CoupledConfig",
    "PenalizedTriple",
    "MixedSolutionReport",
    "StageReport",
    "CoupledNonConvergence",
    "penalized_coupled_solve",
    "continuation_solve",
    "default_eps_schedule",
    "monotone_iteration_solve",
    "variational_minimize",
    "verify_mixed",
    "uniqueness_probe",
    "euler_lagrange_certificate",
    "ascent_exit_rate",
]


@dataclass
class CoupledConfig:
    """Controls for the coupled fixed-point solvers.

    The classification band around u = psi is adaptive,
    max(delta_floor, band_factor * eps * |ftilde|_inf), unless
    band_override pins it; the band actually used is recorded on the
    result and fed to the verifier as its contact threshold.
    """

    tol_outer: float = 1e-9
    tol_pde: float = 1e-8
    max_outer: int = 3000
    damping: float = 0.5
    band_factor: float = 0.5
    delta_floor: float = DELTA_C_FLOOR
    band_override: float | None = None
    eta: float | None = None  # nonlocal mixed-band ascent step; default 0.1 * eps
    inner: ObstacleSolveConfig = field(default_factory=lambda: ObstacleSolveConfig(tol=1e-11))

    def __post_init__(self):
        if self.tol_outer <= 0 or self.tol_pde <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


class CoupledNonConvergence(RuntimeError):
    def __init__(self, message: str, residual_history: list[float], stage: int | None = None):
        where = f" at stage {stage}" if stage is not None else ""
        tail = residual_history[-3:] if residual_history else []
        super().__init__(f"{message}{where}; last increments {tail}")
        self.residual_history = residual_history
        self.stage = stage


@dataclass(frozen=True, eq=False)
class PenalizedTriple:
    """(u, m, alpha) at one penalty level, with convergence history."""

    u: ScalarField
    m: ScalarField
    alpha: ScalarField
    epsilon: float
    iterations: int
    residual_history: list[float]
    delta_band: float
    converged: bool = True

    def __post_init__(self):
        a = self.alpha.values
        if np.any(a < -1e-12) or np.any(a > 1 + 1e-12):
            raise ValueError("alpha must take values in [0, 1]")


@dataclass(frozen=True)
class MixedSolutionReport:
    """Named residuals of every mixed-solution condition."""

    r_obstacle: float
    r_continuation: float
    r_subsolution: float
    r_contact: float
    r_duality: float
    delta_c: float
    grid: dict

    @property
    def max_residual(self) -> float:
        return max(self.r_obstacle, self.r_continuation, self.r_subsolution,
                   self.r_contact, self.r_duality)

    def to_dict(self) -> dict:
        return {
            "r_obstacle": self.r_obstacle,
            "r_continuation": self.r_continuation,
            "r_subsolution": self.r_subsolution,
            "r_contact": self.r_contact,
            "r_duality": self.r_duality,
            "delta_c": self.delta_c,
            "grid": self.grid,
        }


@dataclass(frozen=True)
class StageReport:
    stage: int
    epsilon: float
    iterations: int
    report: MixedSolutionReport

    def to_dict(self) -> dict:
        return {"stage": self.stage, "epsilon": self.epsilon,
                "iterations": self.iterations, **self.report.to_dict()}


def ascent_exit_rate(alpha, v, ftilde, epsilon, band, eta):
    """Clamped ascent update of the exit rate for nonlocal costs.

    Hard contact (v above the band) slams alpha to 1, continuation
    resets it to 0, band nodes take a small step along the effective
    cost. Returns (alpha_new, active_mask).
    """
    new = np.array(alpha, dtype=float, copy=True)
    contact = v > band
    continuation = v < -band
    mixed = ~contact & ~continuation
    new[contact] = 1.0
    new[continuation] = 0.0
    if mixed.any():
        new[mixed] = np.clip(alpha[mixed] + eta * ftilde[mixed], 0.0, 1.0)
    return new, ~continuation


def penalized_coupled_solve(
    cost: CostOperator,
    rho: ScalarField,
    epsilon: float,
    config: CoupledConfig | None = None,
    m_init: ScalarField | None = None,
    alpha_init: ScalarField | None = None,
    with_zero_order: bool = True,
    strict: bool = True,
    u_init: ScalarField | None = None,
    band_init: float | None = None,
) -> PenalizedTriple:
    """Solve the penalized coupled system at one penalty level.

    The exit rate is realized as a continuous ramp across the
    classification band |u| <= band around the obstacle, a concrete
    choice of the free interior alpha (alpha = 1 above the band, 0
    below, linear inside). For local costs the value/density pair is
    then solved jointly by a damped semismooth Newton method, which is
    what keeps contact plateaus stable; split sweeps flap on the
    free-boundary classification. Nonlocal costs, whose coupling has no
    nodal derivative, fall back to damped Picard sweeps with the ramp
    (weak-penalty regime) or the clamped dual ascent on the band.

    strict=False returns the best iterate instead of raising when the
    iteration stalls (used for warm-up continuation stages).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cfg = config or CoupledConfig()
    grid = rho.grid
    if np.any(rho.values < -1e-12):
        raise ValueError("rho must be nonnegative")
    a = elliptic_matrix(grid, with_zero_order)
    a_diag = a.diagonal()
    zero = ScalarField.zeros(grid)
    m = _linsolve(a, rho.values, grid) if m_init is None else np.array(m_init.values, copy=True)
    alpha = np.zeros(grid.n_total) if alpha_init is None else np.array(alpha_init.values, copy=True)
    eta = cfg.eta if cfg.eta is not None else 0.1 * epsilon
    if cost.is_local:
        u0 = None if u_init is None else u_init.values
        return _coupled_newton(cost, rho, epsilon, cfg, a, m, grid, strict,
                               u0=u0, band_prev=band_init)
    history: list[float] = []
    u_prev = None
    band = cfg.delta_floor
    best = None
    best_incr = np.inf
    soft_regime = epsilon * float(a_diag.max()) > 1.0
    for it in range(1, cfg.max_outer + 1):
        f_m = cost.evaluate(m)
        u = _penalized_newton(a, f_m, zero.values, epsilon, grid, cfg.inner, u_prev)
        u_prev = u
        if cfg.band_override is not None:
            band = cfg.band_override
        else:
            scale = float(np.max(np.abs(f_m))) if f_m.size else 0.0
            band = max(cfg.delta_floor, cfg.band_factor * epsilon * scale)
        if soft_regime:
            alpha = np.clip(0.5 * (u / band + 1.0), 0.0, 1.0)
            rate = alpha / epsilon
        else:
            alpha, active = ascent_exit_rate(alpha, u, f_m, epsilon, band, eta)
            rate = np.where(active, alpha / epsilon, 0.0)
        m_tilde = _linsolve((a + sp.diags(rate)).tocsr(), rho.values, grid)
        incr = float(np.max(np.abs(m_tilde - m)))
        history.append(incr)

        def triple(converged):
            return PenalizedTriple(
                u=ScalarField(grid, u), m=ScalarField(grid, m_tilde),
                alpha=ScalarField(grid, alpha), epsilon=epsilon,
                iterations=it, residual_history=history,
                delta_band=band, converged=converged,
            )

        if incr <= cfg.tol_outer:
            f_new = cost.evaluate(m_tilde)
            r_u = float(np.max(np.abs(a @ u + np.maximum(u, 0.0) / epsilon - f_new)))
            r_m = float(np.max(np.abs((a + sp.diags(rate)) @ m_tilde - rho.values)))
            if max(r_u, r_m) <= cfg.tol_pde:
                return triple(True)
        if incr < best_incr:
            best_incr = incr
            best = triple(False)
        m = (1 - cfg.damping) * m + cfg.damping * m_tilde
    if strict:
        raise CoupledNonConvergence("penalized coupled solve did not converge", history)
    return best


def _ramp(s):
    """Piecewise-linear exit-rate profile across the classification band."""
    return np.clip(0.5 * (s + 1.0), 0.0, 1.0)


def _coupled_newton(cost, rho, epsilon, cfg, a, m0_vals, grid, strict,
                    u0=None, band_prev=None):
    """Damped semismooth Newton on the penalized coupled system.

    Unknowns (u, m) jointly solve
        A u + u^+ / eps         = f(m)
        A m + ramp(u/band)/eps m = rho
    where ramp realizes the free interior exit rate as a continuous
    profile across the classification band (width band_factor * eps *
    |f|_inf, floored). Solving the pair jointly is what keeps contact
    plateaus stable; split fixed-point iterations flap on the
    free-boundary classification.
    """
    n = grid.n_total
    rho_v = rho.values
    m = np.array(m0_vals, dtype=float, copy=True)
    scale = float(np.max(np.abs(cost.evaluate(m))))
    if cfg.band_override is not None:
        band = cfg.band_override
    else:
        band = max(cfg.delta_floor, cfg.band_factor * epsilon * scale)
    if u0 is None:
        # cold start from the unconstrained value equation
        u = _linsolve(a, cost.evaluate(m), grid)
    else:
        # warm start keeping the ramp position (hence the exit rate)
        # continuous across penalty stages
        u = np.array(u0, dtype=float, copy=True)
        if band_prev is not None and band_prev > 0:
            inside = np.abs(u) <= band_prev
            u[inside] *= band / band_prev

    def residual(uv, mv):
        f_m = cost.evaluate(mv)
        r1 = a @ uv + np.maximum(uv, 0.0) / epsilon - f_m
        r2 = a @ mv + _ramp(uv / band) / epsilon * mv - rho_v
        return np.concatenate([r1, r2])

    res = residual(u, m)
    norm = float(np.max(np.abs(res)))
    history = [norm]
    it = 0
    for it in range(1, cfg.max_outer + 1):
        if norm <= min(cfg.tol_pde, 1e-10) * (1.0 + scale):
            break
        sigma = _ramp(u / band)
        dsigma = np.where(np.abs(u) < band, 0.5 / band, 0.0)
        j11 = a + sp.diags((u > 0).astype(float) / epsilon)
        j12 = sp.diags(-cost.derivative(m))
        j21 = sp.diags(dsigma * m / epsilon)
        j22 = a + sp.diags(sigma / epsilon)
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        step = sp.linalg.spsolve(jac, -res)
        tau = 1.0
        for _ls in range(50):
            u_new = u + tau * step[:n]
            m_new = m + tau * step[n:]
            res_new = residual(u_new, m_new)
            norm_new = float(np.max(np.abs(res_new)))
            if norm_new <= (1.0 - 1e-4 * tau) * norm or norm_new <= min(cfg.tol_pde, 1e-10):
                break
            tau *= 0.5
        u, m, res, norm = u_new, m_new, res_new, norm_new
        history.append(norm)
        if tau < 1e-12:
            break
    # final exact density solve for the converged rate (restores exact
    # nonnegativity through the M-matrix structure)
    sigma = _ramp(u / band)
    m = _linsolve((a + sp.diags(sigma / epsilon)).tocsr(), rho_v, grid)
    r_u = float(np.max(np.abs(a @ u + np.maximum(u, 0.0) / epsilon - cost.evaluate(m))))
    converged = r_u <= cfg.tol_pde
    if strict and not converged:
        raise CoupledNonConvergence("coupled Newton did not converge", history)
    return PenalizedTriple(
        u=ScalarField(grid, u), m=ScalarField(grid, m),
        alpha=ScalarField(grid, sigma), epsilon=epsilon,
        iterations=it, residual_history=history,
        delta_band=band, converged=converged,
    )


def default_eps_schedule(start: float = 0.1, factor: float = 4.0, stages: int = 8) -> list[float]:
    return [start / factor**j for j in range(stages)]


def continuation_solve(
    cost: CostOperator,
    rho: ScalarField,
    eps_schedule=None,
    config: CoupledConfig | None = None,
    m_init: ScalarField | None = None,
    with_zero_order: bool = True,
):
    """Warm-started penalized solves along a decreasing penalty schedule.

    Across stages the killing rate alpha/eps is kept continuous (alpha
    is rescaled by the penalty ratio), which is what makes warm starts
    effective: the equilibrium rate does not depend on eps. Returns
    (u, m, stage_reports) with a verification report per stage.
    """
    cfg = config or CoupledConfig()
    schedule = list(eps_schedule) if eps_schedule is not None else default_eps_schedule()
    if any(e2 >= e1 for e1, e2 in zip(schedule, schedule[1:])):
        raise ValueError("eps schedule must be strictly decreasing")
    if not schedule:
        raise ValueError("eps schedule must not be empty")
    m_cur = m_init
    alpha_cur = None
    reports: list[StageReport] = []
    triple = None
    for j, eps in enumerate(schedule):
        if triple is not None:
            # rate continuity across stages: alpha_new / eps_new = alpha_old / eps_old
            alpha_cur = ScalarField(rho.grid, np.clip(triple.alpha.values * (eps / schedule[j - 1]), 0.0, 1.0))
            m_cur = triple.m
        final = j == len(schedule) - 1
        try:
            triple = penalized_coupled_solve(
                cost, rho, eps, cfg, m_init=m_cur, alpha_init=alpha_cur,
                with_zero_order=with_zero_order, strict=final,
                u_init=None if triple is None else triple.u,
                band_init=None if triple is None else triple.delta_band,
            )
        except CoupledNonConvergence as err:
            raise CoupledNonConvergence(str(err), err.residual_history, stage=j) from err
        report = verify_mixed(triple.u, triple.m, cost, rho,
                              delta_c=triple.delta_band, with_zero_order=with_zero_order)
        reports.append(StageReport(stage=j, epsilon=eps, iterations=triple.iterations, report=report))
    return triple.u, triple.m, reports


def monotone_iteration_solve(
    cost: CostOperator,
    rho: ScalarField,
    config: ObstacleSolveConfig | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
    delta_c: float | None = None,
    with_zero_order: bool = True,
):
    """Ordered fixed point for anti-monotone costs, from m = 0 upward.

    Each step solves the obstacle problem for u from f(m), then the
    density equation on the continuation set {u < -delta_c}. The m
    iterates must be nondecreasing and the u iterates nonincreasing
    nodewise; a violation means the cost is mis-tagged or delta_c is
    too coarse, and raises. Converges to the smallest solution.
    """
    if cost.monotonicity != ANTI_MONOTONE:
        raise ValueError(f"monotone iteration needs an anti-monotone cost, got {cost.monotonicity!r}")
    grid = rho.grid
    zero = ScalarField.zeros(grid)
    m = ScalarField.zeros(grid)
    u_prev = None
    for n in range(1, max_iter + 1):
        u = solve_obstacle_stationary(cost(m), zero, config, with_zero_order=with_zero_order)
        if u_prev is not None and np.any(u.values > u_prev.values + tol):
            raise RuntimeError("u iterates not nonincreasing; cost mis-tagged or delta_c too large")
        continuation, _ = classify_nodes(u, None, delta_c)
        m_next = solve_density_on_set(continuation, rho, with_zero_order=with_zero_order)
        if np.any(m_next.values < m.values - tol):
            raise RuntimeError("m iterates not nondecreasing; cost mis-tagged or delta_c too large")
        gap = float(np.max(np.abs(m_next.values - m.values)))
        if gap <= tol:
            return u, m_next, n
        m = m_next
        u_prev = u
    raise CoupledNonConvergence("monotone iteration did not converge", [gap])


def variational_minimize(
    potential: PotentialOperator,
    rho: ScalarField,
    feasibility_tol: float = 1e-10,
    max_outer: int = 80,
    with_zero_order: bool = True,
) -> ScalarField:
    """Minimize the integrated potential over {m >= 0, A m <= rho}.

    Augmented Lagrangian on the constraint A m <= rho with projected
    Newton inner solves on m >= 0. The potential must be strictly
    convex (cost strictly increasing in m).
    """
    cost = potential.cost
    if cost.monotonicity != STRICT_MONOTONE:
        raise ValueError("variational route requires a strictly monotone local cost")
    grid = rho.grid
    a = elliptic_matrix(grid, with_zero_order).tocsr()
    at = a.T.tocsr()
    h = grid.cell_volume
    n = grid.n_total
    m = np.zeros(n)
    lam = np.zeros(n)
    mu = 100.0
    prev_viol = np.inf
    for _ in range(max_outer):
        m = _al_inner(potential, a, at, rho.values, m, lam, mu, h)
        r = a @ m - rho.values
        viol = float(np.max(np.maximum(r, 0.0), initial=0.0))
        lam = np.maximum(lam + mu * r, 0.0)
        if viol <= feasibility_tol:
            # stationarity of the Lagrangian over m >= 0, measured
            # against the gradient scale before cancellation
            g = potential.derivative(m) * h + at @ lam
            pg = np.where(m > 1e-14, g, np.minimum(g, 0.0))
            g_scale = float(np.max(np.abs(potential.derivative(m))) * h + np.max(np.abs(at @ lam), initial=0.0))
            if float(np.max(np.abs(pg))) <= 1e-6 * (1e-3 + g_scale):
                return ScalarField(grid, np.maximum(m, 0.0))
        if viol > max(0.25 * prev_viol, feasibility_tol):
            mu = min(mu * 10.0, 1e9)
        prev_viol = viol
    raise CoupledNonConvergence("augmented Lagrangian did not reach feasibility/stationarity",
                                [viol])


def _al_inner(potential, a, at, rho, m0, lam, mu, h, max_iter=120):
    """Projected Newton on m >= 0 for the augmented Lagrangian in m."""
    m = np.maximum(m0, 0.0)

    def grad_hess(mv):
        q = a @ mv - rho + lam / mu
        qp = np.maximum(q, 0.0)
        g = potential.derivative(mv) * h + mu * (at @ qp)
        dmask = (q > 0).astype(float)
        hess = sp.diags(potential.second_derivative(mv) * h) + mu * (at @ sp.diags(dmask) @ a)
        return g, hess.tocsc(), q

    def value(mv):
        q = a @ mv - rho + lam / mu
        qp = np.maximum(q, 0.0)
        return float(np.sum(potential.evaluate(mv)) * h + 0.5 * mu * np.dot(qp, qp))

    for _ in range(max_iter):
        g, hess, _ = grad_hess(m)
        pg = np.where(m > 1e-14, g, np.minimum(g, 0.0))
        if float(np.max(np.abs(pg))) <= 1e-13 * (1.0 + float(np.max(np.abs(g)))):
            break
        free = (m > 1e-14) | (g < 0)
        if not free.any():
            break
        idx = np.flatnonzero(free)
        sub = hess[np.ix_(idx, idx)]
        step = np.zeros_like(m)
        step[idx] = sp.linalg.spsolve(sub.tocsc(), -g[idx])
        # Armijo backtracking with projection onto m >= 0
        t = 1.0
        base = value(m)
        descent = float(np.dot(g, step))
        accepted = False
        for _ls in range(40):
            cand = np.maximum(m + t * step, 0.0)
            if value(cand) <= base + 1e-4 * t * min(descent, 0.0) + 1e-15 * abs(base):
                m = cand
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    return m


def verify_mixed(
    u: ScalarField,
    m: ScalarField,
    cost: CostOperator,
    rho: ScalarField,
    delta_c: float | None = None,
    psi: ScalarField | None = None,
    with_zero_order: bool = True,
) -> MixedSolutionReport:
    """Compute the five mixed-solution residuals for a candidate pair.

    With an obstacle psi the pair is checked in shifted form v = u - psi
    with effective cost f(m) - A psi, which reduces to the plain system
    when psi = 0. The contact threshold actually used is recorded.
    """
    grid = u.grid
    if m.grid != grid or rho.grid != grid or cost.grid != grid:
        raise ValueError("all fields must share one grid")
    a = elliptic_matrix(grid, with_zero_order)
    f_m = cost.evaluate(m.values)
    psi_vals = np.zeros(grid.n_total) if psi is None else psi.values
    v = u.values - psi_vals
    ftilde = f_m if psi is None else f_m - a @ psi_vals
    if delta_c is None:
        delta_c = max(DELTA_C_FLOOR, 1e-8 * float(np.max(np.abs(v), initial=0.0)))
    r_obs = float(np.max(np.abs(np.minimum(psi_vals - u.values, f_m - a @ u.values))))
    am = a @ m.values
    continuation = v < -delta_c
    contact = ~continuation
    r_cont = float(np.max(np.abs((am - rho.values)[continuation]), initial=0.0))
    r_sub = float(np.max(am - rho.values, initial=0.0))
    r_sub = max(r_sub, 0.0)
    r_contact = abs(float(np.sum(ftilde[contact] * m.values[contact]) * grid.cell_volume))
    r_dual = abs(float(np.dot(ftilde, m.values) - np.dot(v, rho.values)) * grid.cell_volume)
    return MixedSolutionReport(
        r_obstacle=r_obs,
        r_continuation=r_cont,
        r_subsolution=r_sub,
        r_contact=r_contact,
        r_duality=r_dual,
        delta_c=float(delta_c),
        grid=grid.metadata(),
    )


def uniqueness_probe(
    cost: CostOperator,
    rho: ScalarField,
    n_starts: int = 5,
    seed: int = 0,
    eps_schedule=None,
    config: CoupledConfig | None = None,
    start_scales=None,
) -> float:
    """Max pairwise density gap over continuation runs from scaled starts.

    Starts are s_k * (A^-1 rho) with deterministic s_k ~ U[0, 2) from
    the seed (or explicit start_scales). Strictly monotone costs give a
    gap at solver precision; non-monotone costs can land on distinct
    solutions.
    """
    if n_starts < 2:
        raise ValueError("need at least two starts")
    grid = rho.grid
    a = elliptic_matrix(grid, True)
    m_base = _linsolve(a, rho.values, grid)
    if start_scales is None:
        rng = np.random.default_rng(seed)
        scales = rng.uniform(0.0, 2.0, n_starts)
    else:
        scales = np.asarray(start_scales, dtype=float)
        if len(scales) != n_starts:
            raise ValueError("start_scales must have n_starts entries")
    results = []
    for s in scales:
        _, m_s, _ = continuation_solve(
            cost, rho, eps_schedule, config, m_init=ScalarField(grid, s * m_base)
        )
        results.append(m_s.values)
    gap = 0.0
    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            gap = max(gap, float(np.max(np.abs(results[i] - results[j]))))
    return gap


def euler_lagrange_certificate(
    cost: CostOperator,
    m: ScalarField,
    rho: ScalarField,
    n_random: int = 4,
    seed: int = 0,
    with_zero_order: bool = True,
) -> float:
    """Min of <f(m), m' - m> over a documented battery of feasible m'.

    The battery holds 0, the unconstrained solve A^-1 rho, exclusion-set
    solves on seeded random node sets, and convex combinations with m
    itself; every member lies in {m' >= 0, A m' <= rho}.
    """
    grid = m.grid
    a = elliptic_matrix(grid, with_zero_order)
    f_m = cost(m)
    battery = [np.zeros(grid.n_total), _linsolve(a, rho.values, grid)]
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        mask = NodeMask(grid, rng.random(grid.n_total) < 0.5)
        battery.append(solve_density_on_set(mask, rho, with_zero_order).values)
    combos = [0.5 * (battery[0] + battery[1]), 0.5 * (m.values + battery[1])]
    battery.extend(combos)
    worst = np.inf
    for mp in battery:
        worst = min(worst, inner(f_m, ScalarField(grid, mp - m.values)))
    return float(worst)
