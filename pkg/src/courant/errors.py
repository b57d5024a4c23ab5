"""Exception hierarchy shared by every courant module."""


class CourantError(Exception):
    """Base class for all package errors."""


class ContractError(CourantError, ValueError):
    """A precondition on an argument was violated."""


class DimensionError(ContractError):
    """Array shapes are incompatible for the requested operation."""


class NumericError(CourantError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SizeError(ContractError):
    """A problem exceeds a configured size cap."""


class FormatError(CourantError, IOError):
    """A file on disk does not conform to its documented format."""
