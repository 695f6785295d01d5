"""Exception types shared across the package."""


class EataError(Exception):
    """Base class for all package errors."""


class NumericDomainError(EataError, ValueError):
    """Input outside the numeric domain of an operation (NaN, inf, negative probability)."""


class DegenerateVectorError(EataError, ValueError):
    """A vector with zero norm where a direction is required."""


class ContractError(EataError, ValueError):
    """Shapes, lengths or architectures do not line up."""


class FormatError(ContractError):
    """A file is not a valid container (bad magic, version or truncation)."""


class InsufficientBatchError(EataError, ValueError):
    """Batch statistics requested on fewer than two rows."""


class ConfigurationError(EataError, ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(EataError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
