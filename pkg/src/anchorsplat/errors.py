"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument is outside the domain an operation accepts."""


class DegenerateInputError(ValueError):
    """Input is well-formed but carries no usable signal (zero variance, all-transparent cloud, ...)."""


class EmptyBinError(ValueError):
    """A distance bin contains no point pairs."""


class PlyParseError(ValueError):
    """A PLY file is malformed; the message names the offending header element or property."""


class DatasetError(ValueError):
    """A dataset directory is incomplete or inconsistent."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite values appeared during optimisation."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration
