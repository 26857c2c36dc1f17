"""Finite-state N-agent and mean field control: HJB solvers on the discretized
simplex, the limiting flow problem, particle simulation and convergence
experiments."""

from mfcontrol.simplex_grid import (
    ChartPoint,
    GridSizeError,
    SimplexGrid,
    SimplexPoint,
    discrete_derivative,
    empirical_measure,
    enumerate_grid,
    from_chart,
    neighbor,
    to_chart,
)
from mfcontrol.model import (
    FiniteSet,
    HamiltonianResult,
    ProblemSpec,
    RateBox,
    aggregate_F,
    aggregate_G,
    hamiltonian,
    pre_hamiltonian,
    quadratic_preset,
)
from mfcontrol.hjb_solver import (
    DivergenceError,
    FeedbackPolicy,
    FullStateField,
    ValueField,
    extract_feedback,
    measure_lipschitz,
    solve_full_state,
    solve_JN,
    solve_VN,
)
from mfcontrol.limit_mfcp import (
    FlowTrajectory,
    ReferenceValue,
    evaluate_cost_J,
    optimal_trajectory,
    reference_value,
    solve_fokker_planck,
)
from mfcontrol.simulator import (
    SimConfig,
    TrajectoryEnsemble,
    estimate_sup_distance,
    multinomial_check,
    simulate_coupled_particles,
    simulate_empirical,
)
from mfcontrol.pontryagin import (
    AdjointPath,
    MfgCouplings,
    UnsupportedModelError,
    build_u,
    chart_hamiltonian,
    mfg_residual,
    solve_adjoint,
)
from mfcontrol.estimators import FullStateSolver, MeanFieldReference, NAgentHJBSolver

__version__ = "0.1.0"

__all__ = [
    "AdjointPath",
    "ChartPoint",
    "DivergenceError",
    "FeedbackPolicy",
    "FiniteSet",
    "FlowTrajectory",
    "FullStateField",
    "FullStateSolver",
    "GridSizeError",
    "HamiltonianResult",
    "MeanFieldReference",
    "MfgCouplings",
    "NAgentHJBSolver",
    "ProblemSpec",
    "RateBox",
    "ReferenceValue",
    "SimConfig",
    "SimplexGrid",
    "SimplexPoint",
    "TrajectoryEnsemble",
    "UnsupportedModelError",
    "ValueField",
    "aggregate_F",
    "aggregate_G",
    "build_u",
    "chart_hamiltonian",
    "discrete_derivative",
    "empirical_measure",
    "enumerate_grid",
    "estimate_sup_distance",
    "evaluate_cost_J",
    "extract_feedback",
    "from_chart",
    "hamiltonian",
    "measure_lipschitz",
    "mfg_residual",
    "multinomial_check",
    "neighbor",
    "optimal_trajectory",
    "pre_hamiltonian",
    "quadratic_preset",
    "reference_value",
    "simulate_coupled_particles",
    "simulate_empirical",
    "solve_adjoint",
    "solve_fokker_planck",
    "solve_full_state",
    "solve_JN",
    "solve_VN",
    "to_chart",
]
