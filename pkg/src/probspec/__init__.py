"""Probabilistic spectral simulation of 1+1-dimensional periodic PDEs."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, CoverageError, CoverageWarning, DimensionError,
                     NumericalError, ProbSpecError)
from .grid import FourierField, SpatialGrid, analyze, derivative_factor, synthesize
from .spectrum import LogSpectrum, SpectrumHyper, power_law_spectrum, regular_l_grid
from .prior import SimState
from .pde import PdeModel, make_burgers, make_diffusion, make_pde, make_static
from .filter import (GaussianProfile, StepOptions, StepResult, initial_state_from_profile,
                     linear_step_closed_form, run_simulation, solve_step_adaptive,
                     solve_step_fixed)
from .baselines import (ReferenceSolution, analytic_diffusion, reference_burgers, spectrum_from_truth,
                        trapezoidal_step)
from .config import RunConfig, load_config, parse_config_text
from .store import TrajectoryStore
from .driver import compare_runs, execute_reference, execute_run, spectra_from_reference

