"""Exception hierarchy shared by every module."""


class IntgError(Exception):
    """Base class for all errors raised by intglab."""


class DimensionError(IntgError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(IntgError, ValueError):
    """A softmax row has no permitted entry."""


class NonFiniteError(IntgError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(IntgError, ValueError):
    """A precondition on the call itself was violated."""


class ConfigError(IntgError, ValueError):
    """Invalid model, variant or training configuration."""


class DataError(IntgError, ValueError):
    """Bad corpus, task file, vocabulary or checkpoint content."""


class NumericalAbort(IntgError, FloatingPointError):
    """Training hit a non-finite loss or gradient."""
