"""Exception hierarchy shared by all modules.

Each class carries a ``category`` string that the CLI reports and maps to an
exit status.
"""


class RRMEError(Exception):
    category = "error"


class ConfigError(RRMEError, ValueError):
    category = "config"


class DataError(RRMEError, ValueError):
    category = "data"


class InvalidKnotsError(DataError):
    pass


class OutOfDomainError(DataError):
    pass


class InvalidArgumentError(RRMEError, ValueError):
    category = "invalid-argument"


class NotApplicableError(InvalidArgumentError):
    category = "not-applicable"


class NumericalError(RRMEError, ArithmeticError):
    category = "numerical"


class DegenerateBasisError(NumericalError):
    pass


class DegenerateUpdateError(NumericalError):
    pass


class SelectionFailedError(NumericalError):
    category = "selection-failed"
