"""Exception types raised across the package."""


class FourierISPError(Exception):
    """Base class for all package errors."""


class DimensionError(FourierISPError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(FourierISPError, ValueError):
    """A numeric parameter is outside its valid range."""


class ConfigError(FourierISPError, ValueError):
    """A configuration file or value is missing or invalid."""


class DatasetError(FourierISPError):
    """A dataset split is missing, empty or malformed."""


class PairingError(DatasetError):
    """A dataset file has no counterpart."""

    def __init__(self, message, orphans=()):
        super().__init__(message)
        self.orphans = list(orphans)


class NumericError(FourierISPError, ArithmeticError):
    """Non-finite values or an unexpected numeric residue."""


class NonFiniteLossError(NumericError):
    """Training produced a non-finite loss term."""

    def __init__(self, term, iteration):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
        self.term = term
        self.iteration = iteration
