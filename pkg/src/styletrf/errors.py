"""Exception types shared across the package."""


class StyleTrfError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(StyleTrfError):
    """An argument violates a documented precondition (bad shape, range, ...)."""


class OutOfBoundsError(StyleTrfError):
    """A query point lies outside the grid bounds."""


class DataError(StyleTrfError):
    """A file could not be read or has unexpected contents.

    ``path`` carries the offending file when known.
    """

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)
        self.path = path


class CheckpointError(DataError):
    """Checkpoint file is missing, truncated, or has the wrong magic."""


class NumericalFailure(StyleTrfError):
    """Optimization produced a non-finite value; carries the iteration."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class InsufficientOverlapError(StyleTrfError):
    """Too few valid pixels remain to compute a meaningful metric."""
