"""Numerical homogenization of random conductance media.

Finite-volume cell problems on a periodized box, effective diffusivity with
variational bounds, Moser-iteration sup-norm audits, and a continuous-time
random walk lane (martingale decomposition, invariance-principle statistics,
additive-functional time changes).
"""

__version__ = "0.1.0"

from .corrector import (CorrectorField, HarmonicCoordinates,
                        SublinearityCurve, fit_loglog_slope,
                        harmonic_coordinates, mean_zero_and_energy_checks,
                        solve_correctors, sublinearity_scan)
from .energy import (DiscreteDirichletForm, MoserSchedule, assemble,
                     ball_norm, energy, moser_exponents, norm_unnormalized,
                     p_star, radial_cutoff, rho_exponent, sobolev_ratio)
from .environment import (CoefficientField, EnvironmentSpec, MomentReport,
                          ball_cells, doubling_diagnostic, generate_field,
                          moment_refinement_sweep, translate,
                          validate_moments)
from .errors import (CheckFailure, ConfigurationError, ConsistencyError,
                     EffdiffError, FormatError, NonConvergenceError,
                     RangeError, ShapeError, SingularityError,
                     StatisticsError, UndefinedRatioError, ValidationError)
from .homogenize import (BoundsReport, EffectiveMatrix, MoserAuditReport,
                         check_bounds, effective_matrix,
                         maximal_inequality_direct, moser_audit,
                         random_directions, variational_bounds)
from .montecarlo import (CLTReport, PathSample, QVReport, TimeChangeSpec,
                         WalkConfig, WalkResult, clt_statistics,
                         environment_average, martingale_decomposition,
                         simulate_walk, time_change)
from .solver import SolveInfo, pcg

__all__ = [name for name in dir() if not name.startswith("_")]
