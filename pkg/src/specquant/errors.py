"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and an ``exit_code``
used by the CLI (1 = configuration problem, 2 = numerical failure).
"""


class SpecquantError(Exception):
    code = "error"
    exit_code = 1


class ConfigurationError(SpecquantError, ValueError):
    code = "config"


class DimensionError(ConfigurationError):
    code = "dimension"


class ParseError(ConfigurationError):
    code = "parse"

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SchemaError(ConfigurationError):
    code = "schema"


class DegenerateGasError(ConfigurationError):
    code = "degenerate-gas"


class DomainError(ConfigurationError):
    code = "domain"


class UnderdeterminedError(ConfigurationError):
    code = "underdetermined"


class BoundError(ConfigurationError):
    code = "bound"


class FormatError(ConfigurationError):
    """Base class for dataset/model file load failures."""

    code = "format"


class VersionMismatchError(FormatError):
    code = "version"


class TruncationError(FormatError):
    code = "truncated"


class FingerprintMismatchError(FormatError):
    code = "fingerprint"


class NumericalError(SpecquantError, ArithmeticError):
    code = "numerical"
    exit_code = 2


class ConditioningError(NumericalError):
    code = "conditioning"

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class DegenerateLibraryError(ConditioningError):
    code = "degenerate-library"


class ConvergenceError(NumericalError):
    code = "convergence"

    def __init__(self, message, component=None):
        if component is not None:
            message = f"component {component}: {message}"
        super().__init__(message)
        self.component = component
