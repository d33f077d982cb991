"""Exception hierarchy shared across the package."""


class FedpmError(Exception):
    """Base class for all package errors."""


class NumericalError(FedpmError):
    """A numerical step failed. ``round_index`` is set when raised inside a run."""

    round_index: int | None = None


class NotPositiveDefinite(NumericalError):
    """Cholesky factorization hit a non-positive pivot; increase damping."""


class DimensionMismatch(FedpmError, ValueError):
    pass


class ShapeMismatch(FedpmError, ValueError):
    pass


class EmptyList(FedpmError, ValueError):
    pass


class EmptyBatch(FedpmError, ValueError):
    pass


class EmptyDataset(FedpmError, ValueError):
    pass


class LengthMismatch(FedpmError, ValueError):
    pass


class ModelMismatch(FedpmError, TypeError):
    """A method was handed an objective it cannot operate on."""


class DataError(FedpmError, ValueError):
    """Problems reading or partitioning data."""


class MalformedLine(DataError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NonBinaryLabel(MalformedLine):
    pass


class DuplicateIndex(MalformedLine):
    pass


class TooManyClients(DataError):
    pass


class InvalidAlpha(DataError):
    pass


class ConfigError(FedpmError, ValueError):
    """Invalid experiment configuration. ``code`` names the failure kind."""

    code = "ConfigError"


class UnknownKey(ConfigError):
    code = "UnknownKey"


class MissingKey(ConfigError):
    code = "MissingKey"


class ConfigTypeError(ConfigError):
    code = "TypeError"


class IncompatibleMethodModel(ConfigError):
    code = "IncompatibleMethodModel"


class MissingFile(ConfigError):
    code = "MissingFile"
