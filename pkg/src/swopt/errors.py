"""Exception types raised across the package."""


class SwoptError(Exception):
    """Base class for all package errors."""


class InvalidParameter(SwoptError, ValueError):
    """An algorithm parameter or configuration value is outside its range."""


class InvalidControl(SwoptError, ValueError):
    """A partition or control violates its structural invariants."""


class NonRefinement(SwoptError, ValueError):
    """Target partition does not contain every breakpoint of the source."""


class NonFinite(SwoptError, ArithmeticError):
    """Integration produced a non-finite or exploding state."""


class OutOfRange(SwoptError, ValueError):
    """A query time lies outside [0, 1]."""


class SimplexViolation(SwoptError, ArithmeticError):
    """A projected mode-weight vector left the simplex."""


class SolverStall(SwoptError, RuntimeError):
    """The optimality subproblem did not reach tolerance within its cap."""

    def __init__(self, message: str, residual: float = float("nan"), iters: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iters = iters


class StepCapExceeded(SwoptError, RuntimeError):
    """The step-size search exhausted its cap without sufficient decrease."""


class PreconditionViolation(SwoptError, ValueError):
    """An operation was called outside its documented precondition."""
