"""Exception hierarchy shared by all modules."""


class PGITSError(Exception):
    """Base class for library errors."""


class ConfigError(PGITSError):
    """Malformed or missing configuration."""


class ParameterError(PGITSError, ValueError):
    """A numeric argument is outside its admissible range."""


class StabilityError(ParameterError):
    """Explicit time stepping would be unstable for the requested step."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class ShapeError(PGITSError, ValueError):
    """Array or tensor shapes do not agree."""


class DataError(PGITSError, ValueError):
    """Input data is malformed, empty, or non-finite."""


class ContractError(PGITSError, RuntimeError):
    """An API precondition was violated by the caller."""


class DivergenceError(PGITSError, RuntimeError):
    """Training produced a non-finite loss."""
