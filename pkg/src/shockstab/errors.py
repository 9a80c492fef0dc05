"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`ShockStabError`; the CLI maps the families onto exit codes.
"""


class ShockStabError(Exception):
    """Base class for all package errors."""


class ConfigError(ShockStabError):
    """Malformed or out-of-schema configuration."""


class StructuralError(ShockStabError):
    """Model violates the block/shape structure of the viscosity."""


class NumericalError(ShockStabError):
    """A numerical sub-solver failed (eigen-solver, Newton, integrator)."""

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class HypothesisError(ShockStabError):
    """A structural or technical hypothesis needed by an operation fails."""

    def __init__(self, message, hypothesis=None):
        super().__init__(message)
        self.hypothesis = hypothesis


class DegenerateShockError(ShockStabError):
    """Endstates coincide, so there is no shock."""


class ReductionError(HypothesisError):
    """The algebraic constraint cannot be solved for the hyperbolic block."""


class NoProfileError(ShockStabError):
    """No connecting orbit was found."""


class AccuracyError(NumericalError):
    """Computed object misses its residual tolerance."""


class DecayError(ShockStabError):
    """Exponential decay fit failed (non-negative slope or no data)."""


class EssentialSpectrumError(ShockStabError):
    """Spectral parameter lies on or inside the essential spectrum."""


class SplittingError(ShockStabError):
    """Consistent splitting of the asymptotic systems fails."""


class InconclusiveError(ShockStabError):
    """Verification could not reach a definite verdict."""


class BlowUpError(NumericalError):
    """Time integration produced non-finite values."""


class IterationAbort(ShockStabError):
    """The fixed-point iteration left its small-data regime."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
