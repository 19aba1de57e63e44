"""Exception types raised across the package."""


class IMCError(Exception):
    """Base class for all package errors."""


class ShapeError(IMCError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DegenerateInputError(IMCError, ValueError):
    """Input is numerically degenerate, e.g. a zero-norm vector."""


class NonFiniteError(IMCError, ValueError):
    """Input contains NaN or Inf."""


class InsufficientBatchError(IMCError, ValueError):
    """Batch too small to contain any negative pair."""


class DataError(IMCError):
    """A feature file or caption index is malformed or inconsistent."""


class DivergenceError(IMCError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
