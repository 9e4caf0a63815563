"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: input/parse problems exit 1,
configuration problems exit 2, numerical failures exit 3.
"""


class CoxforgeError(Exception):
    """Base class for all package-raised errors."""


class InputDataError(CoxforgeError):
    """A file could not be read or its contents failed validation."""


class ConfigError(CoxforgeError):
    """Options, model definitions, or data shapes are inconsistent."""


class NumericError(CoxforgeError):
    """An iterative routine failed to converge or produced non-finite values."""
