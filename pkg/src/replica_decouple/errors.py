class ReplicaDecoupleError(Exception):
    pass


class DomainError(ReplicaDecoupleError, ValueError):
    """Argument outside the domain where an operation is defined."""


class ConfigurationError(ReplicaDecoupleError, ValueError):
    pass


class NumericError(ReplicaDecoupleError, ArithmeticError):
    """Root bracketing failed, or a NaN/inf appeared where a finite value is required."""
