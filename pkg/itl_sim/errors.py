"""Exception hierarchy shared by every itl_sim module."""


class ITLError(Exception):
    """Base class for all simulator errors."""


class AlignmentError(ITLError, ValueError):
    """Two parameter sets (or a batch and a model) disagree on names or shapes."""


class ConfigurationError(ITLError, ValueError):
    """An operation was requested that the model or schedule setting forbids."""


class DataError(ITLError, ValueError):
    """Malformed, empty or out-of-range data."""


class ConfigError(ITLError, ValueError):
    """An experiment configuration failed validation.

    Carries every violation found, not only the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations)
        )


class NumericalError(ITLError, ArithmeticError):
    """A non-finite value appeared in a loss or gradient."""

    def __init__(self, message, parameter=None):
        self.parameter = parameter
        if parameter is not None:
            message = f"{message} (parameter {parameter!r})"
        super().__init__(message)


class CheckpointError(ITLError):
    """A checkpoint could not be decoded."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
