"""Intraday backtest harness.

Timeline (chronological date index t):

* the universe and the risk model are refreshed at the start of every
  block of ``block`` trading days, from data strictly before the block;
* on each day t the expected returns are the overnight returns
  E_t = ln(adj_open_t / adj_close_{t-1}), positions are established at the
  open and liquidated at the close, so the day's P&L is
  H (close / open - 1) on raw prices;
* position bounds, when enabled, are |H_i| <= bound_frac * ADDV_i with ADDV
  taken over the ``addv_days`` days before t.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BacktestError, ConfigError, DataError, SpecriskError
from .moments import PricePanel, close_to_close_returns, compute_moments, overnight_returns
from .optimizer import OptimizationRequest, optimize, regression_holdings, regression_inputs
from .riskmodel import build_model, parse_method

TRADING_DAYS = 252
# rows whose return spread is below this are constant and cannot be normalized
_CONSTANT_RTOL = 1e-14


def addv(panel: PricePanel, day: int, d: int) -> np.ndarray:
    """Average daily dollar volume over the ``d`` days before date index ``day``."""
    if day < d:
        raise DataError(f"ADDV at date index {day} needs {d} prior days")
    return (panel.volume[:, day - d:day] * panel.close[:, day - d:day]).mean(axis=1)


def rolling_addv(panel: PricePanel, d: int) -> np.ndarray:
    """N x T matrix whose column t is addv(panel, t, d); columns t < d are NaN."""
    dv = panel.volume * panel.close
    cs = np.concatenate([np.zeros((panel.n, 1)), np.cumsum(dv, axis=1)], axis=1)
    out = np.full((panel.n, panel.t), np.nan)
    out[:, d:] = (cs[:, d:panel.t] - cs[:, :panel.t - d]) / d
    return out


@dataclass(frozen=True)
class UniverseSchedule:
    """Rebalance blocks as (start, end) date indices (end exclusive) with member rows."""

    intervals: tuple
    addv: tuple
    top_n: int
    d: int

    def members(self, k: int) -> np.ndarray:
        return self.intervals[k][2]


def select_universe(panel: PricePanel, top_n: int, d: int = 21, block: int = 21,
                    start: int | None = None, end: int | None = None,
                    eligible=None) -> UniverseSchedule:
    """Top ``top_n`` instruments by ADDV for each block, ties broken by identifier.

    ``eligible`` optionally maps a block start to a boolean N-mask of
    instruments allowed into that block.
    """
    if top_n < 1 or d < 1 or block < 1:
        raise ConfigError("top_n, d and block must be positive")
    start = d if start is None else int(start)
    end = panel.t if end is None else int(end)
    if start < d:
        raise DataError(f"universe selection needs {d} days of history before the first block")
    if end - start < 1 or end > panel.t:
        raise DataError("no trading days left after the ADDV lookback")
    ids = np.array([str(i) for i in panel.instruments])
    intervals, vols = [], []
    for s in range(start, end, block):
        a = addv(panel, s, d)
        mask = np.ones(panel.n, dtype=bool) if eligible is None else np.asarray(eligible(s))
        cand = np.flatnonzero(mask)
        # descending ADDV, then ascending identifier
        order = cand[np.lexsort((ids[cand], -a[cand]))]
        members = np.sort(order[:top_n])
        intervals.append((s, min(s + block, end), members))
        vols.append(a)
    return UniverseSchedule(tuple(intervals), tuple(vols), top_n, d)


@dataclass(frozen=True)
class BacktestConfig:
    method: str = "min"
    excl_first: bool = False
    use_cov: bool = False
    floor: bool = False
    window: int = 21
    top_n: int = 2000
    addv_days: int = 21
    block: int = 21
    investment: float = 2e7
    bounds: bool = False
    bound_frac: float = 0.01
    regression: bool = False
    intercept: bool = False
    mean_reversion: bool = True
    start: int | None = None
    days: int | None = None

    def __post_init__(self):
        if self.window < 4:
            raise ConfigError("window (M+1 returns) must be at least 4")
        if self.investment <= 0 or self.bound_frac <= 0:
            raise ConfigError("investment and bound_frac must be positive")
        if self.intercept and not self.regression:
            raise ConfigError("intercept applies to regression holdings only")
        # fail early on malformed methods
        self.model_spec()

    def model_spec(self):
        return parse_method(self.method, self.excl_first, self.use_cov, self.floor)

    def to_dict(self) -> dict:
        return asdict(self)


def intraday_pnl(h, p_open, p_close) -> float:
    """P&L of positions opened at ``p_open`` and liquidated at ``p_close``."""
    return float(np.sum(np.asarray(h) * (np.asarray(p_close) / np.asarray(p_open) - 1.0)))


def traded_shares(h, p_open) -> float:
    """Shares bought plus sold over the day: 2 |H| / open per instrument."""
    return float(np.sum(2.0 * np.abs(np.asarray(h)) / np.asarray(p_open)))


@dataclass(frozen=True)
class Metrics:
    roc: float
    sr: float
    cps: float
    sr_degenerate: bool = False
    cps_undefined: bool = False


def compute_metrics(daily_pnl, daily_shares, investment: float) -> Metrics:
    """Annualized ROC (fraction of I), annualized Sharpe, cents per share.

    A zero-variance P&L series reports SR = 0 with ``sr_degenerate`` set;
    no traded shares reports CPS = 0 with ``cps_undefined`` set.
    """
    pnl = np.asarray(daily_pnl, dtype=float)
    shares = np.asarray(daily_shares, dtype=float)
    if pnl.size < 2:
        raise DataError("metrics need at least two days")
    mean = pnl.mean()
    roc = mean / investment * TRADING_DAYS
    sd = pnl.std(ddof=1)
    degenerate = not sd > 1e-12 * max(abs(mean), 1e-300)
    sr = 0.0 if degenerate else mean / sd * math.sqrt(TRADING_DAYS)
    total_shares = shares.sum()
    undefined = not total_shares > 0
    cps = 0.0 if undefined else 100.0 * pnl.sum() / total_shares
    return Metrics(float(roc), float(sr), float(cps), degenerate, undefined)


@dataclass(frozen=True)
class BacktestReport:
    dates: tuple
    instruments: tuple
    daily_pnl: np.ndarray
    daily_shares: np.ndarray
    holdings: np.ndarray  # days x N, zero outside the universe
    zeta: np.ndarray
    metrics: Metrics
    block_k: tuple
    config: dict = field(default_factory=dict)
    flat_days: tuple = ()

    @property
    def roc(self) -> float:
        return self.metrics.roc

    @property
    def sr(self) -> float:
        return self.metrics.sr

    @property
    def cps(self) -> float:
        return self.metrics.cps

    def summary(self) -> dict:
        z = self.zeta
        ks = [k for k in self.block_k if k is not None]
        return {
            "roc": self.metrics.roc,
            "roc_pct": 100.0 * self.metrics.roc,
            "sr": self.metrics.sr,
            "cps": self.metrics.cps,
            "sr_degenerate": self.metrics.sr_degenerate,
            "cps_undefined": self.metrics.cps_undefined,
            "days": len(self.dates),
            "first_date": self.dates[0],
            "last_date": self.dates[-1],
            "flat_days": len(self.flat_days),
            "zeta": {"min": float(z.min()), "median": float(np.median(z)),
                     "mean": float(z.mean()), "max": float(z.max())},
            "k": {"min": min(ks), "median": float(np.median(ks)), "max": max(ks)} if ks else None,
            "config": self.config,
        }


def _eligible_rows(panel: PricePanel, window: int, end: int) -> np.ndarray:
    ac = panel.adj_close[:, end - window:end + 1]
    r = np.log(ac[:, 1:] / ac[:, :-1])
    spread = r.max(axis=1) - r.min(axis=1)
    return spread > _CONSTANT_RTOL * np.maximum(np.abs(r).max(axis=1), np.finfo(float).tiny)


def run_backtest(panel: PricePanel, config: BacktestConfig) -> BacktestReport:
    """Run the intraday simulation; raises BacktestError naming the failing date."""
    spec = config.model_spec()
    first = max(config.addv_days, config.window + 1)
    start = first if config.start is None else int(config.start)
    if start < first:
        raise DataError(f"first trading day must have {first} days of history (index >= {first})")
    end = panel.t if config.days is None else min(panel.t, start + int(config.days))
    if end - start < 2:
        raise DataError(f"panel of {panel.t} days leaves fewer than two trading days "
                        f"after {first} days of history")

    schedule = select_universe(panel, config.top_n, config.addv_days, config.block, start, end,
                               eligible=lambda s: _eligible_rows(panel, config.window, s - 1))
    a_roll = rolling_addv(panel, config.addv_days) if config.bounds else None
    a_zeta = a_roll if a_roll is not None else rolling_addv(panel, config.addv_days)

    n_days = end - start
    pnl = np.zeros(n_days)
    shares = np.zeros(n_days)
    hold = np.zeros((n_days, panel.n))
    zeta = np.zeros(n_days)
    block_k = []
    flat = []
    for b_start, b_end, members in schedule.intervals:
        date = panel.dates[b_start]
        model = None
        if members.size >= 2:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    rets = close_to_close_returns(panel, config.window, b_start - 1, rows=members)
                    model = build_model(compute_moments(rets), spec)
            except SpecriskError as exc:
                raise BacktestError(f"{date}: risk model construction failed: {exc}") from exc
        block_k.append(None if model is None else model.k)
        if config.regression and model is not None:
            loads, weights = regression_inputs(model)

        for t in range(b_start, b_end):
            row = t - start
            date = panel.dates[t]
            if model is None:
                flat.append(date)
                continue
            e = overnight_returns(panel, t)[members]
            if not np.ptp(e) > _CONSTANT_RTOL * max(np.abs(e).max(), np.finfo(float).tiny):
                flat.append(date)
                continue
            bounds = config.bound_frac * a_roll[members, t] if config.bounds else None
            try:
                if config.regression:
                    h = regression_holdings(e, loads, weights, config.investment,
                                            config.intercept, bounds, config.mean_reversion).h
                else:
                    h = optimize(OptimizationRequest(e, model, config.investment, bounds,
                                                     config.mean_reversion)).h
            except SpecriskError as exc:
                raise BacktestError(f"{date}: optimization failed: {exc}") from exc
            p_open = panel.open[members, t]
            pnl[row] = intraday_pnl(h, p_open, panel.close[members, t])
            shares[row] = traded_shares(h, p_open)
            hold[row, members] = h
            cap = config.bound_frac * a_zeta[members, t]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(h == 0, 0.0, np.abs(h) / cap)
            zeta[row] = float(ratio.max())

    metrics = compute_metrics(pnl, shares, config.investment)
    return BacktestReport(tuple(panel.dates[start:end]), panel.instruments, pnl, shares, hold,
                          zeta, metrics, tuple(block_k), config.to_dict(), tuple(flat))
