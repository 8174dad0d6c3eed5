"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class SpecriskError(Exception):
    """Base class for all package errors."""


class ConfigError(SpecriskError, ValueError):
    """Invalid parameters, unknown config keys, bad paths."""


class DataError(SpecriskError, ValueError):
    """Malformed or degenerate input data."""


class NumericalError(SpecriskError, ArithmeticError):
    """A computation could not be carried out (singular system, no convergence...)."""


class ConvergenceError(NumericalError):
    pass


class ModelError(NumericalError):
    """A factor model could not be constructed with the requested parameters."""


class InfeasibleError(NumericalError):
    """Optimization constraints cannot be satisfied simultaneously."""


class BacktestError(SpecriskError):
    """A backtest day failed; the message names the date, ``__cause__`` holds the reason."""
