"""Exception types shared across the toolkit."""


class CfaError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CfaError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CfaError, ValueError):
    """An input lies outside the domain of a function or distribution."""


class ContractError(CfaError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(CfaError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""
