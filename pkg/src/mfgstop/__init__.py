"""Finite-difference solvers and verifiers for mean-field games of
optimal stopping, built around the mixed-solution equilibrium concept:
players may randomize their exit, so the density carries a killing rate
on the contact set instead of vanishing there.
"""

from .grid import (
    Grid,
    TimeGrid,
    ScalarField,
    FieldTrajectory,
    NodeMask,
    build_grid,
    build_timegrid,
    apply_elliptic,
    elliptic_matrix,
    inner,
    classify_nodes,
    write_field_csv,
    read_field_csv,
    write_trajectory_csv,
    read_trajectory_csv,
)
from .obstacle import (
    ObstacleSolveConfig,
    ObstacleConvergenceError,
    solve_obstacle_stationary,
    obstacle_oracle,
    solve_obstacle_penalized,
    solve_obstacle_parabolic,
)
from .density import (
    KillingData,
    FaceVelocities,
    solve_density_on_set,
    solve_density_penalized,
    check_subsolution,
    solve_density_parabolic,
)
from .costs import CostOperator, PotentialOperator
from .stationary import (
    CoupledConfig,
    PenalizedTriple,
    MixedSolutionReport,
    CoupledNonConvergence,
    penalized_coupled_solve,
    continuation_solve,
    default_eps_schedule,
    monotone_iteration_solve,
    variational_minimize,
    verify_mixed,
    uniqueness_probe,
    euler_lagrange_certificate,
)
from .evolutive import (
    ObstacleOperator,
    EvolutiveMixedReport,
    apply_obstacle_operator,
    osmfg_penalized_solve,
    osmfg_continuation,
    verify_mixed_evolutive,
    evolutive_uniqueness_probe,
)
from .control import (
    Hamiltonian,
    ControlMixedReport,
    solve_hjb_obstacle,
    cosmfg_coupled_solve,
    verify_cosmfg,
    fenchel_conjugate,
    control_objective,
)
from . import scenarios

__version__ = "0.1.0"
