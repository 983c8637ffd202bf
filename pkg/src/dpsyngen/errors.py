"""Exception types shared across the package."""


class DPSynGenError(Exception):
    """Base class for all package errors."""


class RejectedInputError(DPSynGenError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigurationError(DPSynGenError, ValueError):
    """A configuration is inconsistent or unusable."""


class NumericalError(DPSynGenError, ArithmeticError):
    """A computation produced a non-finite value."""


class InfeasibleTargetError(DPSynGenError):
    """A privacy target cannot be met within the allowed noise range."""


class BudgetExhaustedError(DPSynGenError):
    """Private training would exceed the privacy budget.

    The ledger at the moment of the abort is attached as ``ledger``.
    """

    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger


class NotFoundError(DPSynGenError):
    """A search terminated without finding a qualifying index."""

    def __init__(self, message, terminal_value=None):
        super().__init__(message)
        self.terminal_value = terminal_value


class OutOfRegionError(DPSynGenError, ValueError):
    """A bound was requested outside the region where it is valid."""


class IdxFormatError(DPSynGenError, ValueError):
    """Malformed IDX file."""


class MagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass
