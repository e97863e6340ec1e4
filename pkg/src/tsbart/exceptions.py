"""Exception hierarchy.

Data problems derive from :class:`DataError`, bad settings from
:class:`ConfigError`, and linear-algebra breakdowns from
:class:`NumericalError`. The command-line front end maps these to exit
codes 3, 2 and 4 respectively.
"""


class TsbartError(Exception):
    """Base class for all package errors."""


class ConfigError(TsbartError, ValueError):
    """Invalid configuration value or combination of options."""


class DataError(TsbartError, ValueError):
    """Input data violates a contract."""


class SchemaError(DataError):
    """A column named in the schema is missing or has the wrong role."""


class ParseError(DataError):
    """A cell could not be parsed; ``row`` is the 1-based data row."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDataError(DataError):
    """The input contains no data rows."""


class DegenerateGridError(DataError):
    """The target covariate takes a single value."""


class GridMembershipError(DataError):
    """A target-covariate value is not on the time grid."""


class MissingCellError(DataError):
    """A grid value has no observations to estimate the baseline from."""


class NumericalError(TsbartError, ArithmeticError):
    """A factorization or other numerical step failed."""
