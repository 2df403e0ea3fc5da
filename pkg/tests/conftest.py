"""Shared fixtures: expensive scenario solves are cached per session."""

import numpy as np
import pytest

from mfgstop.control import cosmfg_coupled_solve
from mfgstop.evolutive import osmfg_continuation, verify_mixed_evolutive
from mfgstop.scenarios import scenario_standard
from mfgstop.stationary import continuation_solve


@pytest.fixture(scope="session")
def monotone_1d_solution():
    sc = scenario_standard("monotone_1d")
    u, m, reports = continuation_solve(sc.cost, sc.rho, list(sc.eps_schedule))
    return sc, u, m, reports


@pytest.fixture(scope="session")
def monotone_2d_solution():
    sc = scenario_standard("monotone_2d")
    u, m, reports = continuation_solve(sc.cost, sc.rho, list(sc.eps_schedule))
    return sc, u, m, reports


@pytest.fixture(scope="session")
def evolutive_psi0_solution():
    sc = scenario_standard("evolutive_psi0")
    sol, stage_reports = osmfg_continuation(sc.cost, sc.obstacle_op, sc.m0,
                                            sc.timegrid, list(sc.eps_schedule))
    report = verify_mixed_evolutive(sol.u, sol.m, sc.cost, sc.obstacle_op, sc.m0,
                                    delta_c=sol.delta_band)
    return sc, sol, report, stage_reports


@pytest.fixture(scope="session")
def evolutive_heat_g_solution():
    sc = scenario_standard("evolutive_heat_g")
    sol, stage_reports = osmfg_continuation(sc.cost, sc.obstacle_op, sc.m0,
                                            sc.timegrid, list(sc.eps_schedule))
    report = verify_mixed_evolutive(sol.u, sol.m, sc.cost, sc.obstacle_op, sc.m0,
                                    delta_c=sol.delta_band)
    return sc, sol, report, stage_reports


@pytest.fixture(scope="session")
def control_solution():
    sc = scenario_standard("control_smoothnorm")
    sol, report = cosmfg_coupled_solve(sc.cost, sc.hamiltonian, sc.m0,
                                       sc.timegrid, list(sc.eps_schedule))
    return sc, sol, report
