"""Exception types shared across the package."""


class CellMixerError(Exception):
    """Base class for all package errors."""


class ParameterError(CellMixerError, ValueError):
    """An argument is out of range or shapes disagree."""


class DegenerateInputError(CellMixerError, ValueError):
    """Input data carries no usable signal (constant field, empty mask, ...)."""


class DataError(CellMixerError):
    """A file or manifest record could not be read or is malformed."""


class TrainingError(CellMixerError, RuntimeError):
    """Optimization diverged."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
