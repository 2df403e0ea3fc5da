"""Canonical instances and counterexample constructions, built
programmatically and fed to the solvers and verifiers: a registry of
standard regression fixtures plus the three special constructions
(non-uniqueness, non-existence of classical solutions, and obstacle-
induced non-uniqueness for strictly monotone costs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import Hamiltonian
from .costs import CostOperator
from .evolutive import ObstacleOperator, verify_mixed_evolutive
from .grid import (
    Grid,
    ScalarField,
    TimeGrid,
    build_grid,
    build_timegrid,
    elliptic_matrix,
    inner,
)
from .obstacle import _linsolve
from .stationary import (
    CoupledConfig,
    MixedSolutionReport,
    continuation_solve,
    default_eps_schedule,
    verify_mixed,
)

__all__ = [
    "Scenario",
    "STANDARD_NAMES",
    "scenario_standard",
    "scenario_nonuniqueness",
    "scenario_nonexistence",
    "scenario_obstacle_nonuniqueness",
    "raised_cosine_bump",
    "gaussian_density",
    "run_scenario_evidence",
]


def raised_cosine_bump(grid: Grid, peak: float = 1.0) -> ScalarField:
    """Smooth nonnegative bump supported in the middle third of the box."""
    coords = grid.coordinates()
    centre = np.array([(a + b) / 2 for a, b in grid.bounds])
    radius = min((b - a) / 6 for a, b in grid.bounds)
    r = np.linalg.norm(coords - centre, axis=1)
    vals = np.where(r <= radius, 0.5 * peak * (1.0 + np.cos(np.pi * r / radius)), 0.0)
    return ScalarField(grid, vals)


def gaussian_density(grid: Grid, sigma: float = 0.1, mass: float = 1.0) -> ScalarField:
    """Gaussian bump at the domain centre, normalized to a discrete mass."""
    coords = grid.coordinates()
    centre = np.array([(a + b) / 2 for a, b in grid.bounds])
    r2 = np.sum((coords - centre) ** 2, axis=1)
    vals = np.exp(-r2 / (2 * sigma**2))
    total = float(np.sum(vals)) * grid.cell_volume
    return ScalarField(grid, vals * (mass / total))


@dataclass(frozen=True, eq=False)
class Scenario:
    """A fully specified instance: grids, data, and the expected outcome."""

    name: str
    problem: str  # "sosmfg" | "osmfg" | "cosmfg"
    grid: Grid
    cost: CostOperator
    expected_outcome: str
    rho: ScalarField | None = None
    m0: ScalarField | None = None
    timegrid: TimeGrid | None = None
    obstacle_op: ObstacleOperator | None = None
    hamiltonian: Hamiltonian | None = None
    eps_schedule: tuple[float, ...] = field(default_factory=lambda: tuple(default_eps_schedule()))


def _monotone_cost(grid: Grid, f0_value: float = -0.5) -> CostOperator:
    return CostOperator.local_power(grid, a=1.0, p=1.0, f0=ScalarField.constant(grid, f0_value))


def _build_monotone_1d() -> Scenario:
    grid = build_grid(1, (0.0, 1.0), 31)
    return Scenario(
        name="monotone_1d", problem="sosmfg", grid=grid,
        cost=_monotone_cost(grid), rho=raised_cosine_bump(grid),
        expected_outcome="unique_mixed",
    )


def _build_monotone_2d() -> Scenario:
    grid = build_grid(2, ((0.0, 1.0), (0.0, 1.0)), (15, 15))
    return Scenario(
        name="monotone_2d", problem="sosmfg", grid=grid,
        cost=_monotone_cost(grid), rho=raised_cosine_bump(grid),
        expected_outcome="unique_mixed",
    )


def _build_anti_monotone_1d() -> Scenario:
    # bistable by construction: f(0) > 0 (so (0, 0) solves the system)
    # while f at the unconstrained density is negative (so it solves too)
    grid = build_grid(1, (0.0, 1.0), 31)
    rho = raised_cosine_bump(grid)
    weight = raised_cosine_bump(grid)
    a = elliptic_matrix(grid, True)
    m_star = ScalarField(grid, _linsolve(a, rho.values, grid))
    pairing = inner(weight, m_star)
    c0 = 0.25
    c1 = -(c0 + 0.5) / pairing
    cost = CostOperator.nonlocal_affine(grid, c0=c0, c1=c1, weight=weight)
    return Scenario(
        name="anti_monotone_1d", problem="sosmfg", grid=grid,
        cost=cost, rho=rho, expected_outcome="multiple_classical",
    )


def _build_evolutive_psi0() -> Scenario:
    grid = build_grid(1, (0.0, 1.0), 31)
    tg = build_timegrid(1.0, 50)
    return Scenario(
        name="evolutive_psi0", problem="osmfg", grid=grid,
        cost=_monotone_cost(grid), m0=gaussian_density(grid), timegrid=tg,
        obstacle_op=ObstacleOperator.zero(grid, tg),
        expected_outcome="unique_mixed",
    )


def _build_evolutive_heat_g() -> Scenario:
    grid = build_grid(1, (0.0, 1.0), 31)
    tg = build_timegrid(1.0, 50)
    g_cost = CostOperator.local_power(grid, a=0.5, p=1.0, f0=ScalarField.zeros(grid))
    return Scenario(
        name="evolutive_heat_g", problem="osmfg", grid=grid,
        cost=_monotone_cost(grid), m0=gaussian_density(grid), timegrid=tg,
        obstacle_op=ObstacleOperator.heat_source(g_cost),
        expected_outcome="unique_mixed",
    )


def _build_control_smoothnorm() -> Scenario:
    grid = build_grid(1, (0.0, 1.0), 31)
    tg = build_timegrid(1.0, 50)
    return Scenario(
        name="control_smoothnorm", problem="cosmfg", grid=grid,
        cost=_monotone_cost(grid), m0=gaussian_density(grid), timegrid=tg,
        hamiltonian=Hamiltonian.smoothed_norm(ScalarField.constant(grid, 1.0)),
        expected_outcome="unique_mixed",
    )


_REGISTRY = {
    "monotone_1d": _build_monotone_1d,
    "monotone_2d": _build_monotone_2d,
    "anti_monotone_1d": _build_anti_monotone_1d,
    "evolutive_psi0": _build_evolutive_psi0,
    "evolutive_heat_g": _build_evolutive_heat_g,
    "control_smoothnorm": _build_control_smoothnorm,
}

STANDARD_NAMES = tuple(sorted(_REGISTRY))


def scenario_standard(name: str) -> Scenario:
    """Deterministic fully specified instance from the registry."""
    try:
        builder = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; registered: {', '.join(STANDARD_NAMES)}")
    return builder()


# ---------------------------------------------------------------------------
# Counterexample constructions


@dataclass(frozen=True, eq=False)
class NonuniquenessEvidence:
    scenario: Scenario
    m_star: ScalarField
    u_star: ScalarField
    report_zero: MixedSolutionReport
    report_star: MixedSolutionReport
    gap: float


def scenario_nonuniqueness(n: int = 31, delta_c: float | None = None) -> NonuniquenessEvidence:
    """Two verified solutions for one non-monotone nonlocal cost.

    The cost f(m) = 1 - 2 <w, m> / <w, m*> (w the distance to the
    domain centre) gives f(m*) = -1 and f(0) = +1, so both (0, 0) and
    (u*, m*) with u* solving the linear equation with source -1 pass
    the mixed-solution verifier.
    """
    grid = build_grid(1, (0.0, 1.0), n)
    rho = raised_cosine_bump(grid)
    a = elliptic_matrix(grid, True)
    m_star = ScalarField(grid, _linsolve(a, rho.values, grid))
    coords = grid.coordinates()
    centre = np.array([(lo + hi) / 2 for lo, hi in grid.bounds])
    weight = ScalarField(grid, np.linalg.norm(coords - centre, axis=1))
    e_star = inner(weight, m_star)
    cost = CostOperator.nonlocal_affine(grid, c0=1.0, c1=-2.0 / e_star, weight=weight)
    f_star = cost(m_star).values
    f_zero = cost(ScalarField.zeros(grid)).values
    if np.max(np.abs(f_star + 1.0)) > 1e-12 or np.max(np.abs(f_zero - 1.0)) > 1e-12:
        raise AssertionError("cost normalization failed: expected f(m*) = -1, f(0) = +1")
    u_star = ScalarField(grid, _linsolve(a, f_star, grid))
    if delta_c is None:
        delta_c = max(1e-12, 1e-8 * u_star.max_abs())
    if np.any(u_star.values >= -delta_c):
        raise RuntimeError("contact set of u* is nonempty; refine the grid")
    zero = ScalarField.zeros(grid)
    report_zero = verify_mixed(zero, zero, cost, rho, delta_c=delta_c)
    report_star = verify_mixed(u_star, m_star, cost, rho, delta_c=delta_c)
    scenario = Scenario(name="nonuniqueness", problem="sosmfg", grid=grid, cost=cost,
                        rho=rho, expected_outcome="multiple_classical")
    return NonuniquenessEvidence(
        scenario=scenario, m_star=m_star, u_star=u_star,
        report_zero=report_zero, report_star=report_star,
        gap=float(np.max(np.abs(m_star.values))),
    )


@dataclass(frozen=True)
class NonexistenceStage:
    epsilon: float
    report: MixedSolutionReport
    contact_mass: float
    ratio: float


@dataclass(frozen=True, eq=False)
class NonexistenceEvidence:
    scenario: Scenario
    u_star: ScalarField
    m_star: ScalarField
    stages: tuple[NonexistenceStage, ...]
    u: ScalarField
    m: ScalarField
    final_report: MixedSolutionReport
    classical_floor: float


def scenario_nonexistence(n: int = 31, ball_radius: float = 0.0,
                          config: CoupledConfig | None = None,
                          eps_schedule=None) -> NonexistenceEvidence:
    """Strictly monotone cost with no classical solution.

    The cost is built so that the natural candidate pair (u*, m*) has
    u* vanishing only at the centre (or on a small ball) while m* stays
    strictly positive there, so no classical solution can exist. The
    penalty continuation still converges to a mixed solution; the mass
    on the contact band stays above a positive floor at every stage,
    which is the reported evidence of genuinely mixed behavior.
    """
    grid = build_grid(1, (0.0, 1.0), n)
    rho = raised_cosine_bump(grid)
    a = elliptic_matrix(grid, True)
    m_star_vals = _linsolve(a, rho.values, grid)
    if np.any(m_star_vals <= 0):
        raise AssertionError("m* must be strictly positive at interior nodes")
    m_star = ScalarField(grid, m_star_vals)
    x = grid.coordinates()[:, 0]
    x0_index = int(np.argmin(np.abs(x - 0.5)))
    x0 = x[x0_index]
    profile = -np.sin(np.pi * x) * np.maximum(np.abs(x - x0) - ball_radius, 0.0) ** 2
    base_raw = a @ profile
    flat = profile == 0.0
    denom = float(np.max(base_raw[flat]))
    if denom <= 0:
        raise AssertionError("touching set must carry positive elliptic image")
    # scale so the cost's zero level on the touching set keeps most of m*
    # (and the discrete contact integral of base * m stays small)
    scale = 0.1 * float(np.min(m_star_vals[flat])) / denom
    u_star = ScalarField(grid, scale * profile)
    base = ScalarField(grid, a @ u_star.values)
    cost = CostOperator.local_affine_shifted(grid, base=base, m_ref=m_star)
    if np.max(np.abs(cost(m_star).values - base.values)) > 1e-12:
        raise AssertionError("construction must satisfy A u* = f(m*) nodewise")

    schedule = list(eps_schedule) if eps_schedule is not None else default_eps_schedule()
    cfg = config or CoupledConfig()
    scenario = Scenario(name="nonexistence", problem="sosmfg", grid=grid, cost=cost,
                        rho=rho, expected_outcome="no_classical_mixed_exists",
                        eps_schedule=tuple(schedule))
    # run the continuation stage by stage, keeping each stage's solution
    # so the contact-band mass can be tabulated against epsilon
    from .stationary import penalized_coupled_solve

    floor = np.inf
    m_init = None
    alpha_init = None
    stage_rows: list[NonexistenceStage] = []
    triple = None
    for j, eps in enumerate(schedule):
        if triple is not None:
            alpha_init = ScalarField(grid, np.clip(triple.alpha.values * (eps / schedule[j - 1]), 0.0, 1.0))
            m_init = triple.m
        triple = penalized_coupled_solve(cost, rho, eps, cfg, m_init=m_init, alpha_init=alpha_init)
        report = verify_mixed(triple.u, triple.m, cost, rho, delta_c=triple.delta_band)
        contact = triple.u.values >= -triple.delta_band
        contact_mass = float(np.sum(triple.m.values[contact])) * grid.cell_volume
        ratio = contact_mass / max(report.r_contact, 1e-30)
        stage_rows.append(NonexistenceStage(epsilon=eps, report=report,
                                            contact_mass=contact_mass, ratio=ratio))
        floor = min(floor, contact_mass)
    final_report = stage_rows[-1].report
    return NonexistenceEvidence(
        scenario=scenario, u_star=u_star, m_star=m_star,
        stages=tuple(stage_rows), u=triple.u, m=triple.m,
        final_report=final_report, classical_floor=float(floor),
    )


@dataclass(frozen=True, eq=False)
class ObstacleNonuniquenessEvidence:
    scenario: Scenario
    u_star: ScalarField
    m_star: ScalarField
    u_low: ScalarField
    psi_at_m_star: ScalarField
    psi_at_zero: ScalarField
    report_star: MixedSolutionReport
    report_low: MixedSolutionReport
    gap: float


def scenario_obstacle_nonuniqueness(
    cost: CostOperator | None = None,
    n: int = 31,
    ratio_floor_scale: float = 1e-10,
) -> ObstacleNonuniquenessEvidence:
    """For a strictly monotone cost, an m-dependent obstacle that admits
    two verified solutions: the interpolation psi(m) between u* (at
    m = m*) and u_low (at m = 0) makes both endpoints solve the system.
    """
    grid = build_grid(1, (0.0, 1.0), n)
    rho = raised_cosine_bump(grid)
    if cost is None:
        cost = _monotone_cost(grid)
    if cost.monotonicity != "strict_monotone":
        raise ValueError("this construction requires a strictly monotone cost")
    a = elliptic_matrix(grid, True)
    m_star_vals = _linsolve(a, rho.values, grid)
    m_star = ScalarField(grid, m_star_vals)
    u_star = ScalarField(grid, _linsolve(a, cost(m_star).values, grid))
    u_low = ScalarField(grid, _linsolve(a, cost(ScalarField.zeros(grid)).values, grid))
    floor = ratio_floor_scale * float(np.max(m_star_vals))
    guarded = m_star_vals < floor
    if np.any(guarded & (rho.values > 0)):
        raise RuntimeError("ratio floor triggered at interior nodes carrying mass; refine the grid")

    def psi_of(m: ScalarField) -> ScalarField:
        frac = np.where(guarded, 0.0, m.values / np.where(guarded, 1.0, m_star_vals))
        return ScalarField(grid, u_star.values * frac + (1.0 - frac) * u_low.values)

    psi_star = psi_of(m_star)
    psi_zero = psi_of(ScalarField.zeros(grid))
    if np.max(np.abs(psi_star.values - u_star.values)) > 1e-13 * (1 + u_star.max_abs()):
        raise AssertionError("psi(m*) must equal u* nodewise")
    if np.max(np.abs(psi_zero.values - u_low.values)) > 1e-13 * (1 + u_low.max_abs()):
        raise AssertionError("psi(0) must equal u_low nodewise")
    report_star = verify_mixed(u_star, m_star, cost, rho, psi=psi_star)
    report_low = verify_mixed(u_low, ScalarField.zeros(grid), cost, rho, psi=psi_zero)
    scenario = Scenario(name="obstacle_nonuniqueness", problem="sosmfg", grid=grid,
                        cost=cost, rho=rho, expected_outcome="multiple_with_obstacle")
    return ObstacleNonuniquenessEvidence(
        scenario=scenario, u_star=u_star, m_star=m_star, u_low=u_low,
        psi_at_m_star=psi_star, psi_at_zero=psi_zero,
        report_star=report_star, report_low=report_low,
        gap=float(np.max(np.abs(m_star_vals))),
    )


# ---------------------------------------------------------------------------
# Evidence driver for registry scenarios (used by the CLI and the
# structural-invariants acceptance test)


def run_scenario_evidence(scenario: Scenario, config: CoupledConfig | None = None) -> dict:
    """Solve a registry scenario and report residuals plus invariants.

    Returns a dict with the verifier report, positivity / subsolution /
    mass-monotonicity checks, and the solution fields.
    """
    cfg = config or CoupledConfig()
    out: dict = {"name": scenario.name, "problem": scenario.problem,
                 "expected_outcome": scenario.expected_outcome}
    if scenario.problem == "sosmfg":
        u, m, stage_reports = continuation_solve(
            scenario.cost, scenario.rho, list(scenario.eps_schedule), cfg)
        report = stage_reports[-1].report
        a = elliptic_matrix(scenario.grid, True)
        slack = scenario.rho.values - a @ m.values
        out.update({
            "u": u, "m": m, "report": report,
            "stage_reports": stage_reports,
            "min_density": float(np.min(m.values)),
            "min_subsolution_slack": float(np.min(slack)),
            "mass_monotone_violation": 0.0,
        })
        return out
    if scenario.problem == "osmfg":
        from .evolutive import osmfg_continuation

        sol, stage_reports = osmfg_continuation(
            scenario.cost, scenario.obstacle_op, scenario.m0, scenario.timegrid,
            list(scenario.eps_schedule), cfg)
        report = verify_mixed_evolutive(sol.u, sol.m, scenario.cost,
                                        scenario.obstacle_op, scenario.m0,
                                        delta_c=sol.delta_band)
        m_arr = sol.m.array()
    else:
        from .control import cosmfg_coupled_solve

        sol, report = cosmfg_coupled_solve(
            scenario.cost, scenario.hamiltonian, scenario.m0, scenario.timegrid,
            list(scenario.eps_schedule), cfg)
        stage_reports = None
        m_arr = sol.m.array()
    masses = m_arr.sum(axis=1) * scenario.grid.cell_volume
    out.update({
        "solution": sol, "report": report, "stage_reports": stage_reports,
        "min_density": float(np.min(m_arr)),
        "mass_monotone_violation": float(np.max(np.diff(masses), initial=0.0)),
        "masses": masses,
    })
    return out
