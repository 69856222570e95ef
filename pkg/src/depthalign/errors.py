"""Exception hierarchy shared across the package."""


class DepthAlignError(Exception):
    """Base class for all package errors."""


class ParameterError(DepthAlignError, ValueError):
    """Invalid argument or configuration value."""


class DimensionError(DepthAlignError, ValueError):
    """Array shapes do not agree."""


class SingularityError(DepthAlignError, ZeroDivisionError):
    """A schedule value makes the requested formula singular."""


class OrderingError(DepthAlignError, ValueError):
    """Timesteps given in the wrong order."""


class DegenerateError(DepthAlignError, ValueError):
    """Input has no spread where a fit or normalization needs it."""


class InsufficientDataError(DegenerateError):
    """Too few points for the requested fit."""


class NumericalError(DepthAlignError, ArithmeticError):
    """An iterative solver failed to converge."""


class DivergenceError(NumericalError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class FormatError(DepthAlignError, ValueError):
    """Malformed file contents."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class RangeError(DepthAlignError, ValueError):
    """Value cannot be represented in the target encoding."""
