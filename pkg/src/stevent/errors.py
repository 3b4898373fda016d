"""Exception hierarchy.

Each family maps to a distinct CLI exit code (see :mod:`stevent.cli`).
"""


class SteventError(Exception):
    """Base class for all package errors."""


class ConfigError(SteventError, ValueError):
    """Invalid user configuration or arguments."""


class DataError(SteventError, ValueError):
    """Malformed or inconsistent input data."""


class IngestionError(DataError):
    pass


class TimelineError(DataError):
    pass


class DuplicationError(DataError):
    pass


class WindowError(DataError):
    pass


class ParameterError(SteventError, ValueError):
    """Model parameters outside their admissible region."""


class NumericalError(SteventError, ArithmeticError):
    """Linear algebra or likelihood evaluation failed."""


class RankDeficiencyError(NumericalError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {self.columns}")


class UnknownStatisticError(ConfigError, KeyError):
    def __init__(self, unknown, available):
        self.unknown = list(unknown)
        self.available = list(available)
        super().__init__(f"unknown statistic id(s) {self.unknown}; available: {self.available}")

    def __str__(self):
        return self.args[0]
