"""Exception hierarchy shared by all modules."""


class RcarError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(RcarError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class DataError(RcarError, ValueError):
    exit_code = 4


class FormatError(DataError):
    pass


class DomainError(RcarError, ValueError):
    """Input outside the mathematical domain of an operation (zero norms, empty sets)."""

    exit_code = 4


class AdapterError(RcarError, RuntimeError):
    exit_code = 5


class TrainingError(RcarError, RuntimeError):
    exit_code = 5
