"""Exception hierarchy shared by the library and the CLI."""


class HCVRPError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(HCVRPError, ValueError):
    """Unknown preset/tag, inconsistent shapes or invalid hyperparameters."""

    exit_code = 2


class DataError(HCVRPError, ValueError):
    """Malformed or infeasible input data."""

    exit_code = 3


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class ContractViolation(HCVRPError, RuntimeError):
    """An operation was called outside its precondition (indicates a bug)."""

    exit_code = 4


class BudgetExceeded(HCVRPError, RuntimeError):
    exit_code = 5
