"""Value functions of exit-time optimal control problems from backward
Hamiltonian characteristics, with conjugate-time detection, regularity
certificates and an independent grid oracle."""

from .catalog import CATALOG, SMOOTH_PROBLEMS, get, make_problem
from .characteristics import (Characteristic, PiecewiseConstantControl, Sweep, dual_arc,
                              hamiltonian_system_residual, integrate_backward,
                              integrate_variational, pmp_residual, simulate_trajectory, sweep)
from .conjugate import (Certificate, ConjugateReport, detect_conjugate_like,
                        detect_conjugate_time, regularity_certificate)
from .errors import (ExitFlowError, InvalidInputError, DegenerateCovectorError,
                     NonsmoothPointError, CapabilityError, BracketFailureError,
                     DegenerateSeedError, OutOfChartError, NonsmoothCharacteristicError,
                     NoExitError, IterationLimitError, InsufficientResolutionError,
                     IncompatibleGridsError, NoDataError, CompatibilityWarning,
                     EmptyFieldWarning)
from .grid import ValueGrid
from .hamiltonian import (argmax_control, eval_hamiltonian, hamiltonian_gradients,
                          hamiltonian_hessians)
from .oracle import solve_grid
from .problem import ControlProblem, RegularityFlags, validate_assumptions
from .targets import boundary_seeds, oriented_distance
from .terminal import solve_mu, terminal_covector_field
from .value_field import (build_field, check_proximal_subdifferential, check_superdifferential,
                          compare_fields, detect_multivalued, semiconcavity_probe)

__version__ = "0.1.0"
