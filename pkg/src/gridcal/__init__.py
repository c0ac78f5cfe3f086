"""gridcal: calibration of power-system dynamic load models from simulated
PMU measurements by variational assimilation over a whole observation window,
with a truncated-Gaussian description of the remaining parameter uncertainty.
"""

from .errors import (ConfigError, GridcalError, GridFormatError,
                     GridValidationError, NewtonError, PowerFlowError,
                     ReportError, SamplingError)
from .grid import (BranchSpec, BusSpec, FaultScenario, FaultView,
                   GeneratorSpec, GridModel, LoadSpec, Parameters,
                   apply_fault, bundled_case_path, grid_from_dict,
                   grid_to_dict, load_grid, load_injection)
from .dynamics import Dynamics, ScenarioDynamics, initialize_steady_state
from .simulate import (SensitivityTrajectory, SimOptions, SystemState,
                       Trajectory, propagate_sensitivities, simulate,
                       simulate_tlm_surrogate, simulate_with_sensitivities,
                       step_backward_euler)
from .observation import (ObservationOperator, ObservationSet,
                          export_observations, import_observations, observe,
                          synthesize_observations, voltage_operator)
from .forward import DaeForward, LinearForward, LinearizedForward, make_forward
from .inversion import (InversionResult, ObjectiveEvaluation, OptimizerConfig,
                        TruncatedGaussian, gradient, objective, solve_map,
                        solve_map_refreshed_tlm)
from .posterior import (PosteriorApprox, UncertaintyCone, build_posterior,
                        export_cone, export_posterior, import_posterior,
                        inflate, sample_posterior, uncertainty_cones)

__version__ = "0.1.0"
