"""Chance-constrained re-dispatch for unbalanced 3-phase distribution feeders.

The feeder state is known only through a noisy estimate; voltage-band limits
are enforced probabilistically by tightening them with the estimation
covariance, and the resulting convex program re-dispatches distributed
generation and the transformer taps in a closed loop.
"""

from .chance_constraints import (ChanceSpec, TightenedConstraintSet,
                                 check_corner_sufficiency, compute_alpha,
                                 inverse_normal_cdf, min_halfplane_coeffs,
                                 tighten_constraints, verify_chance_satisfaction)
from .exceptions import (ConfigError, DegenerateEstimateError,
                         EstimationDivergedError, GridOpfError,
                         InvalidCovarianceError, LowVoltageError,
                         PowerFlowDivergedError, UnobservableError)
from .grid_model import (AdmittanceMatrix, GridModel, TapVector, apply_tap,
                         build_admittance, build_isolated_admittance,
                         grid_from_dict, load_grid)
from .opf_core import (ConvexProgram, EnergyLimits, OpfSolution, Setpoints,
                       add_thermal_constraints, assemble_program,
                       extract_setpoints, line_current_terms,
                       relax_voltage_constraints, round_taps, solve_program)
from .powerflow import (ComplexVoltageState, PowerInjection, SensitivityMatrix,
                        compute_injections, flat_start, linearize,
                        solve_powerflow)
from .sim_harness import (Scenario, StepRecord, compare_cases, emit_outputs,
                          load_inputs, run_scenario, run_timestep, summarize,
                          verify_scenario)
from .state_estimation import (EstimationResult, Measurement,
                               MeasurementConfig, MeasurementSet,
                               estimate_state, generate_measurements,
                               polar_to_rect_covariance)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
