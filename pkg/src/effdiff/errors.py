"""Exception types shared across the package.

Exit-code mapping used by the command line front end:
ConfigurationError / ValidationError -> 2, NonConvergenceError -> 3,
CheckFailure -> 4. Everything else is a plain bug and escapes as-is.
"""


class EffdiffError(Exception):
    """Base class for package errors."""


class ConfigurationError(EffdiffError, ValueError):
    """Invalid parameters (ranges, admissibility, incompatible sizes)."""


class ValidationError(EffdiffError, ValueError):
    """A validation stage failed (moment condition, schema, format)."""


class RangeError(EffdiffError, ValueError):
    """A geometric or numeric range was exceeded (radius > box/2, clock overflow)."""


class ShapeError(EffdiffError, ValueError):
    """Mismatched grid shapes between operands."""


class NonConvergenceError(EffdiffError, RuntimeError):
    """Iterative solver hit max_iter; carries the last relative residual."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history


class SingularityError(EffdiffError, ValueError):
    """Degenerate (zero-conductance / zero-rate) field where ellipticity is required."""


class UndefinedRatioError(EffdiffError, ZeroDivisionError):
    """A diagnostic ratio was requested for an identically-zero function."""


class ConsistencyError(EffdiffError, ValueError):
    """Cross-object mismatch (field/corrector hash, report schema version)."""


class StatisticsError(EffdiffError, ValueError):
    """Not enough samples for the requested statistic."""


class FormatError(EffdiffError, ValueError):
    """Bad magic/version/layout in a binary artifact."""


class CheckFailure(EffdiffError, RuntimeError):
    """An oracle check requested via --check did not hold."""
