"""Exception hierarchy; the CLI maps each family to an exit code."""


class LayeredBVSError(Exception):
    """Base class for all package errors."""


class ConfigError(LayeredBVSError):
    """Invalid configuration or hyperparameters."""


class DataError(LayeredBVSError, ValueError):
    """Invalid or inconsistent input data."""


class DegenerateSampleError(DataError):
    """A sample is too degenerate for the requested estimate."""


class NumericalError(LayeredBVSError, ArithmeticError):
    """A numerical routine failed (non-SPD matrix, divergence, ...)."""


class SelectionError(NumericalError):
    """No grid point produced a usable fit."""
