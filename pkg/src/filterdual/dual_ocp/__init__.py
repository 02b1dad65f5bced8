"""The dual optimal control problem: BSDE solvers, costs and optimality checks."""

from .bsde import (
    RegressionSolution,
    SimplexTable,
    bsde_solve_deterministic,
    bsde_solve_optimal_synthesis,
    bsde_solve_regression,
    costate_forward,
    deterministic_trajectory,
    synthesis_table,
)
from .diagnostics import (
    BiasCalibration,
    MartingaleReport,
    PolicyIterationResult,
    calibrate_bias,
    closed_form_cost,
    cost_J,
    cost_samples,
    dual_trajectory,
    duality_gap,
    estimator_S,
    gap_report,
    gap_samples,
    martingale_diagnostic,
    martingale_process,
    policy_iteration,
    running_estimator_check,
    value_function,
)
from .policy import BasisSpec, ControlPolicy, CostReport, DualTrajectory, GapReport, optimal_control_law

__all__ = [name for name in dir() if not name.startswith("_")]
