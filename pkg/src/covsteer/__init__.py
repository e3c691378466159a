"""Chance-constrained covariance steering by successive convexification."""

from .blocks import (BlockSystem, CostWeights, assemble, assemble_cost_weights,
                     control_covariance, selector_u, selector_x, state_covariance)
from .conic import (ConicProgram, ConicSolution, SolverSettings, dump_program,
                    project_cone, smat, solve, svec)
from .discretization import (ContinuousLinearization, LinearizedStep,
                             NumericalFailure, ReferenceTrajectory,
                             discretize_all, discretize_exact,
                             discretize_first_order, linearize, psd_sqrt)
from .dynamics import (DragDoubleIntegrator, ModelSpec, drift,
                       finite_difference_jacobians, jacobian_u, jacobian_x,
                       linear_model)
from .iterative import (DivergenceError, IterationRecord, SteeringResult,
                        SteeringSettings, SubproblemError, ics_solve,
                        propagate_mean, reshape_policy)
from .montecarlo import (Ellipse, SimOptions, SimulationError,
                         SimulationResult, confidence_ellipse,
                         simulate_closed_loop, violation_rate, violation_table)
from .subproblem import (CSProblemSpec, HalfSpace, MeanCost, NormRow, Policy,
                         QuadraticObjective, Relaxation, TrustRegion,
                         allocate_risk, build_chance_constraints, build_cost,
                         build_terminal_cov, build_terminal_mean,
                         build_trust_region, chance_row_margin, evaluate_cost,
                         inverse_normal_cdf, lower, relaxation_scale_needed)

__version__ = "0.1.0"
