"""Seeded synthetic data: factor-driven return panels and price panels.

Price panels follow cross-sectionally correlated log-price random walks.
Each day's move splits into an overnight and an intraday leg; the intraday
leg partially reverts the idiosyncratic part of the overnight move, which is
what a mean-reversion alpha on overnight returns can harvest.
"""

from __future__ import annotations

import datetime

import numpy as np

from .moments import PricePanel, ReturnsPanel


def factor_loadings(n: int, n_factors: int, rng) -> np.ndarray:
    """Market factor plus decaying style factors."""
    load = rng.standard_normal((n, n_factors))
    load[:, 0] = 1.0 + 0.3 * rng.standard_normal(n)
    load *= 0.6 ** np.arange(n_factors)
    return load


def synthetic_returns(n: int, obs: int, n_factors: int = 5, seed=None,
                      factor_vol: float = 0.01, spec_vol: float = 0.015) -> ReturnsPanel:
    """N x obs daily returns, newest first, with a decaying factor spectrum."""
    rng = np.random.default_rng(seed)
    load = factor_loadings(n, n_factors, rng)
    f = factor_vol * rng.standard_normal((n_factors, obs))
    eps = spec_vol * rng.uniform(0.5, 1.5, n)[:, None] * rng.standard_normal((n, obs))
    return ReturnsPanel(tuple(f"S{i:05d}" for i in range(n)), load @ f + eps)


def synthetic_prices(n: int, days: int, n_factors: int = 5, seed=None,
                     reversion: float = 0.3, overnight_vol: float = 0.006,
                     intraday_vol: float = 0.012, factor_vol: float = 0.008,
                     start_date: str = "2010-01-04") -> PricePanel:
    """Synthetic raw/adjusted price panel over ``days`` business days.

    ``reversion`` is the fraction of the idiosyncratic overnight move undone
    during the following session. Adjusted prices equal raw prices (no
    corporate actions).
    """
    rng = np.random.default_rng(seed)
    load = factor_loadings(n, n_factors, rng)
    spec_scale = rng.uniform(0.5, 1.5, n)[:, None]
    f_on = 0.5 * factor_vol * rng.standard_normal((n_factors, days))
    f_id = factor_vol * rng.standard_normal((n_factors, days))
    eps_on = overnight_vol * spec_scale * rng.standard_normal((n, days))
    eps_id = intraday_vol * spec_scale * rng.standard_normal((n, days))
    overnight = load @ f_on + eps_on
    intraday = load @ f_id + eps_id - reversion * eps_on
    overnight[:, 0] = 0.0

    log_open = np.empty((n, days))
    log_close = np.empty((n, days))
    prev = np.log(rng.uniform(10.0, 100.0, n))
    for t in range(days):
        log_open[:, t] = prev + overnight[:, t]
        log_close[:, t] = log_open[:, t] + intraday[:, t]
        prev = log_close[:, t]
    open_, close = np.exp(log_open), np.exp(log_close)
    shares = np.exp(rng.normal(13.0, 1.0, n))[:, None] * np.exp(0.3 * rng.standard_normal((n, days)))
    volume = np.round(shares)

    d0 = datetime.date.fromisoformat(start_date)
    dates = []
    d = d0
    while len(dates) < days:
        if d.weekday() < 5:
            dates.append(d.isoformat())
        d += datetime.timedelta(days=1)
    return PricePanel(tuple(f"S{i:05d}" for i in range(n)), dates, open_, close, open_.copy(),
                      close.copy(), volume)
