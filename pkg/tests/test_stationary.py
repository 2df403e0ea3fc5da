import numpy as np
import pytest
import scipy.sparse.linalg as spla

from mfgstop.costs import CostOperator
from mfgstop.grid import ScalarField, build_grid, elliptic_matrix, inner
from mfgstop.obstacle import solve_obstacle_stationary
from mfgstop.scenarios import raised_cosine_bump, scenario_standard
from mfgstop.stationary import (
    CoupledConfig,
    CoupledNonConvergence,
    continuation_solve,
    default_eps_schedule,
    euler_lagrange_certificate,
    monotone_iteration_solve,
    penalized_coupled_solve,
    uniqueness_probe,
    variational_minimize,
    verify_mixed,
)


@pytest.fixture(scope="module")
def grid():
    return build_grid(1, (0.0, 1.0), 31)


@pytest.fixture(scope="module")
def rho(grid):
    return raised_cosine_bump(grid)


def local_cost(grid, f0_value, a=1.0, p=1.0):
    return CostOperator.local_power(grid, a, p, ScalarField.constant(grid, f0_value))


def test_constant_negative_cost_decouples(grid, rho):
    # f < 0 everywhere keeps the obstacle inactive: no killing, m free
    cost = local_cost(grid, -1.0)
    triple = penalized_coupled_solve(cost, rho, 1e-4)
    free = spla.spsolve(elliptic_matrix(grid).tocsc(), rho.values)
    assert np.max(np.abs(triple.m.values - free)) <= 1e-9
    assert np.all(triple.u.values < 0)


def test_constant_positive_cost_kills_density(grid, rho):
    eps = 1e-5
    cost = CostOperator.local_power(grid, 0.0, 1.0, ScalarField.constant(grid, 1.0))
    triple = penalized_coupled_solve(cost, rho, eps)
    assert np.max(triple.u.values) >= 0.0
    assert np.max(triple.m.values) <= 2.0 * eps * np.max(rho.values)
    assert np.min(triple.alpha.values[triple.u.values > triple.delta_band] if
                  np.any(triple.u.values > triple.delta_band) else np.array([1.0])) == 1.0


def test_coupled_self_consistency_residuals(grid, rho):
    # mixed-zone instance: killing pins the density inside the bump
    cost = local_cost(grid, -0.005)
    eps = 1e-5
    triple = penalized_coupled_solve(cost, rho, eps)
    a = elliptic_matrix(grid)
    r_u = np.max(np.abs(a @ triple.u.values + np.maximum(triple.u.values, 0) / eps
                        - cost.evaluate(triple.m.values)))
    rate = triple.alpha.values / eps
    r_m = np.max(np.abs(a @ triple.m.values + rate * triple.m.values - rho.values))
    assert max(r_u, r_m) <= 1e-8
    assert np.all(triple.alpha.values >= 0) and np.all(triple.alpha.values <= 1)
    assert np.all(triple.alpha.values[triple.u.values > triple.delta_band] == 1.0)


def test_continuation_zero_source(grid):
    cost = local_cost(grid, -0.5)
    u, m, reports = continuation_solve(cost, ScalarField.zeros(grid))
    assert np.max(np.abs(m.values)) == 0.0
    assert all(sr.report.max_residual <= 1e-8 for sr in reports)


def test_continuation_single_stage_equals_single_solve(grid, rho):
    cost = local_cost(grid, -0.5)
    u1, m1, reports = continuation_solve(cost, rho, [1e-3])
    triple = penalized_coupled_solve(cost, rho, 1e-3)
    assert np.array_equal(m1.values, triple.m.values)
    assert np.array_equal(u1.values, triple.u.values)
    assert len(reports) == 1


def test_continuation_rejects_bad_schedule(grid, rho):
    cost = local_cost(grid, -0.5)
    with pytest.raises(ValueError):
        continuation_solve(cost, rho, [1e-3, 1e-3])
    with pytest.raises(ValueError):
        continuation_solve(cost, rho, [])


def test_continuation_contact_residuals_decrease(grid, rho):
    cost = local_cost(grid, -0.005)
    _, _, reports = continuation_solve(cost, rho, default_eps_schedule(stages=10))
    r_dual = [sr.report.r_duality for sr in reports]
    assert r_dual[-1] <= 1e-6
    assert r_dual[-1] <= r_dual[0] + 1e-12


def test_monotone_iteration_contact_everywhere(grid, rho):
    # f(0) > 0 makes stopping optimal immediately: the smallest solution is 0
    w = raised_cosine_bump(grid)
    cost = CostOperator.nonlocal_affine(grid, 1.0, -2.0, w)
    u, m, n_iter = monotone_iteration_solve(cost, rho)
    assert n_iter <= 2
    assert np.all(m.values == 0.0)
    assert np.all(u.values == 0.0)


def test_monotone_iteration_no_contact(grid, rho):
    w = raised_cosine_bump(grid)
    cost = CostOperator.nonlocal_affine(grid, -1.0, -1.0, w)
    u, m, n_iter = monotone_iteration_solve(cost, rho)
    free = spla.spsolve(elliptic_matrix(grid).tocsc(), rho.values)
    assert np.max(np.abs(m.values - free)) <= 1e-9
    assert n_iter <= 3


def test_monotone_iteration_requires_anti_monotone(grid, rho):
    with pytest.raises(ValueError):
        monotone_iteration_solve(local_cost(grid, -0.5), rho)


def test_monotone_iteration_below_continuation(grid, rho):
    sc = scenario_standard("anti_monotone_1d")
    u_it, m_it, n_iter = monotone_iteration_solve(sc.cost, sc.rho)
    _, m_cont, _ = continuation_solve(sc.cost, sc.rho, list(sc.eps_schedule))
    assert n_iter <= 50
    assert np.all(m_it.values <= m_cont.values + 1e-6)


def test_variational_saturating_instance(grid, rho):
    # unconstrained minimizer far above feasibility: optimum saturates A m = rho
    cost = CostOperator.local_affine_shifted(grid, base=ScalarField.zeros(grid),
                                             m_ref=ScalarField.constant(grid, 10.0))
    m = variational_minimize(cost.potential(), rho)
    free = spla.spsolve(elliptic_matrix(grid).tocsc(), rho.values)
    assert np.max(np.abs(m.values - free)) <= 1e-8


def test_variational_zero_minimizer(grid, rho):
    cost = local_cost(grid, 0.0)
    m = variational_minimize(cost.potential(), rho)
    assert np.max(np.abs(m.values)) <= 1e-12


def test_variational_feasibility_and_certificate(grid, rho):
    cost = local_cost(grid, -0.005)
    m = variational_minimize(cost.potential(), rho)
    a = elliptic_matrix(grid)
    assert np.max(a @ m.values - rho.values) <= 1e-9
    assert np.min(m.values) >= 0.0
    assert euler_lagrange_certificate(cost, m, rho) >= -1e-6


def test_variational_matches_qp_oracle(grid, rho):
    cvxopt = pytest.importorskip("cvxopt")
    cvxopt.solvers.options["show_progress"] = False
    cvxopt.solvers.options["abstol"] = 1e-12
    cvxopt.solvers.options["reltol"] = 1e-12
    cost = local_cost(grid, -0.01)
    m = variational_minimize(cost.potential(), rho)
    n = grid.n_total
    h = grid.cell_volume
    a = elliptic_matrix(grid).toarray()
    p_mat = cvxopt.matrix(h * np.eye(n))
    q_vec = cvxopt.matrix(h * np.full(n, -0.01))
    g_mat = cvxopt.matrix(np.vstack([a, -np.eye(n)]))
    h_vec = cvxopt.matrix(np.concatenate([rho.values, np.zeros(n)]))
    sol = cvxopt.solvers.qp(p_mat, q_vec, g_mat, h_vec)
    m_qp = np.array(sol["x"]).ravel()
    assert np.max(np.abs(m.values - m_qp)) <= 1e-6


def test_variational_requires_strict_monotone(grid, rho):
    with pytest.raises(ValueError):
        variational_minimize(CostOperator.local_power(
            grid, -1.0, 1.0, ScalarField.constant(grid, 1.0)).potential(), rho)


def test_verify_mixed_flags_constructed_violation(grid, rho):
    # (0, A^-1 rho) with f negative somewhere: the value equation residual shows
    cost = local_cost(grid, -0.5)
    free = ScalarField(grid, spla.spsolve(elliptic_matrix(grid).tocsc(), rho.values))
    report = verify_mixed(ScalarField.zeros(grid), free, cost, rho)
    assert report.r_obstacle > 0.1


def test_verify_mixed_trivial_pair(grid, rho):
    cost = CostOperator.local_power(grid, 1.0, 1.0, ScalarField.constant(grid, 0.2))
    u = solve_obstacle_stationary(cost(ScalarField.zeros(grid)), ScalarField.zeros(grid))
    report = verify_mixed(u, ScalarField.zeros(grid), cost, rho)
    assert report.max_residual <= 1e-10


def test_duality_identity_on_converged_solution(grid, rho):
    for f0 in (-0.5, -0.005):
        cost = local_cost(grid, f0)
        u, m, reports = continuation_solve(cost, rho, default_eps_schedule(stages=10))
        assert abs(inner(cost(m), m) - inner(u, rho)) <= 1e-6
        assert reports[-1].report.r_duality <= 1e-6


def test_uniqueness_probe_determinism(grid, rho):
    cost = local_cost(grid, -0.5)
    gap1 = uniqueness_probe(cost, rho, n_starts=3, seed=11)
    gap2 = uniqueness_probe(cost, rho, n_starts=3, seed=11)
    assert gap1 == gap2
    assert uniqueness_probe(cost, rho, n_starts=2, seed=0,
                            start_scales=[1.0, 1.0]) == 0.0


def test_uniqueness_probe_requires_two_starts(grid, rho):
    with pytest.raises(ValueError):
        uniqueness_probe(local_cost(grid, -0.5), rho, n_starts=1)


def test_nonconvergence_reports_history(grid, rho):
    cost = local_cost(grid, -0.005)
    cfg = CoupledConfig(max_outer=1, tol_outer=1e-16, tol_pde=1e-16)
    with pytest.raises(CoupledNonConvergence) as err:
        penalized_coupled_solve(cost, rho, 1e-5, cfg)
    assert len(err.value.residual_history) >= 1


def test_every_density_passes_subsolution(grid, rho):
    from mfgstop.density import check_subsolution

    for f0 in (-0.5, -0.02, -0.005):
        _, m, _ = continuation_solve(local_cost(grid, f0), rho)
        assert check_subsolution(m, rho).values.min() >= -1e-9
        assert m.values.min() >= -1e-12
