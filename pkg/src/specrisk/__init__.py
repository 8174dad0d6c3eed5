"""Statistical risk models, Sharpe-optimal dollar-neutral holdings and intraday backtests."""

from .errors import (BacktestError, ConfigError, ConvergenceError, DataError, InfeasibleError,
                     ModelError, NumericalError, SpecriskError)

__version__ = "0.1.0"

__all__ = [
    "BacktestError", "ConfigError", "ConvergenceError", "DataError", "InfeasibleError",
    "ModelError", "NumericalError", "SpecriskError", "__version__",
]
