"""Exception types shared across the package."""


class BoundaryFlowError(Exception):
    """Base class for all package errors."""


class NegativeInteriorMass(BoundaryFlowError):
    """Interior cell masses must be nonnegative."""


class MassImbalance(BoundaryFlowError):
    """Interior mass plus boundary atoms must sum to zero."""


class NegativeDensity(BoundaryFlowError):
    """Sampled density function returned a negative value."""


class ParseError(BoundaryFlowError):
    """Malformed measure / config file. Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GridMismatch(BoundaryFlowError):
    """Operands live on different grids."""


class InvalidExponent(BoundaryFlowError):
    """Lq exponent or truncation level out of range."""


class PreconditionViolated(BoundaryFlowError):
    """An operation was called outside its documented domain."""


class SolverDiverged(BoundaryFlowError):
    """Variational step solver failed to reach the requested residual."""

    def __init__(self, message, step_index=None):
        if step_index is not None:
            message = f"step {step_index}: {message}"
        super().__init__(message)
        self.step_index = step_index


class InfeasibleScheme(BoundaryFlowError):
    """The step's transport program had no feasible point (defensive)."""


class NonFiniteState(BoundaryFlowError):
    """Finite-difference state became NaN or infinite."""


class GridTooCoarse(BoundaryFlowError):
    """Grid resolution is insufficient for the requested construction."""


class ConfigError(BoundaryFlowError):
    """Invalid run configuration (bad key, value, or missing file)."""
