"""Exception hierarchy shared by all modules."""


class CellPolError(Exception):
    """Base class for package errors."""


class DomainError(CellPolError, ValueError):
    """A pointwise map left its domain (vanishing denominator, non-finite value)."""


class FieldFormatError(CellPolError, ValueError):
    """A field file or array does not match the expected layout."""


class ConvergenceError(CellPolError, RuntimeError):
    """An iterative solver or time stepper failed to meet its tolerance."""


class ConsistencyError(CellPolError, RuntimeError):
    """Two independent evaluations of the same quantity disagree."""


class ConfigError(CellPolError, ValueError):
    """Invalid run configuration."""
