"""Drift-implicit backward Euler for stochastic delay differential
equations, with a coupled-path Monte Carlo harness for strong-error,
residual, regularity and mean-square stability experiments."""

__version__ = "0.1.0"

from .analysis import (ConvergenceReport, ResidualReport, StabilityReport,
                       admissible_epsilon, delta_star,
                       estimate_holder_exponent, estimate_residual_scaling,
                       fit_convergence_order, fit_decay_rate, holder_curve,
                       mean_square_trajectory, strong_error_at_T)
from .brownian import BrownianPath, coarsen, sample_increments
from .errors import (GridError, NumericalError, ParameterError, SddeBemError,
                     SolverError, StepSizeGuardWarning)
from .integrator import (SolverConfig, TimeGrid, Trajectory, TrajectoryBatch,
                         bem_integrate, bem_integrate_batch, bem_step,
                         em_integrate, em_integrate_batch, make_grid,
                         solve_drift_implicit)
from .models import (AssumptionConstants, SampleSpec, SddeModel,
                     ViolationReport, check_dissipativity_condition,
                     check_initial_holder, check_monotone_condition,
                     get_model, make_example1, make_example2,
                     validate_evaluations)

__all__ = [
    "AssumptionConstants", "BrownianPath", "ConvergenceReport", "GridError",
    "NumericalError", "ParameterError", "ResidualReport", "SampleSpec",
    "SddeBemError", "SddeModel", "SolverConfig", "SolverError",
    "StabilityReport", "StepSizeGuardWarning", "TimeGrid", "Trajectory",
    "TrajectoryBatch", "ViolationReport", "admissible_epsilon",
    "bem_integrate", "bem_integrate_batch", "bem_step", "coarsen",
    "check_dissipativity_condition", "check_initial_holder",
    "check_monotone_condition", "delta_star", "em_integrate",
    "em_integrate_batch", "estimate_holder_exponent",
    "estimate_residual_scaling", "fit_convergence_order", "fit_decay_rate",
    "get_model", "holder_curve", "make_example1", "make_example2",
    "make_grid", "mean_square_trajectory", "sample_increments",
    "solve_drift_implicit", "strong_error_at_T", "validate_evaluations",
]
