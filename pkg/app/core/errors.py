"""Error hierarchy shared by the library, the CLI and the service surface."""

from typing import Optional


class DfkitError(Exception):
    """Base class. `code` is the machine-readable prefix, `exit_code` the CLI status."""

    code = "ERROR"
    exit_code = 1

    def line(self) -> str:
        return f"dfkit-error[{self.code}]: {self}"


class UsageError(DfkitError):
    code = "USAGE"
    exit_code = 2


class ConfigurationError(DfkitError):
    code = "CONFIG"
    exit_code = 2


class DataError(DfkitError):
    code = "DATA"
    exit_code = 3


class ShapeError(DfkitError):
    code = "SHAPE"
    exit_code = 4


class ContractError(DfkitError):
    code = "CONTRACT"
    exit_code = 4


class NumericError(DfkitError):
    code = "NUMERIC"
    exit_code = 4

    def __init__(self, message: str, minor_index: Optional[int] = None, step: Optional[str] = None):
        super().__init__(message)
        self.minor_index = minor_index
        self.step = step


class DivergenceError(DfkitError):
    code = "DIVERGENCE"
    exit_code = 5
