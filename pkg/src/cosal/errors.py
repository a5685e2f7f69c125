"""Exception hierarchy shared by every cosal module."""


class CosalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CosalError):
    """Shapes or axes of the operands do not fit the operation."""


class UsageError(CosalError):
    """The call itself is malformed (bad flag, bad argument, missing input)."""


class DataError(CosalError):
    """Input data violates a contract (missing files, out-of-range values)."""


class StateError(CosalError):
    """A stateful component was used before it was ready."""


class SolverError(CosalError):
    """An iterative solver failed to reach its tolerance."""


class PlacementError(CosalError):
    """No valid paste placement could be found for a synthesis pair."""


class DegenerateGroupWarning(UserWarning):
    """A single-image group cannot use cross-image suppression."""
