"""Price and return panels, sample moments, and the M x M kernel phi.

Conventions
-----------
Price panels are stored chronologically (column 0 is the oldest date), the
way they arrive in CSV. Return panels are stored newest-first: column 0 is
s=1, the most recent observation, and there are M+1 columns.
"""

from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DataError

PRICE_COLUMNS = ("instrument", "date", "open", "close", "adj_open", "adj_close", "volume")
RETURN_COLUMNS = ("instrument", "date", "value")

# rows whose spread is below this fraction of their magnitude count as constant
_CONSTANT_ROW_RTOL = 1e-14


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PricePanel:
    """Dense N x T panel of open/close (raw and adjusted) prices and volumes."""

    instruments: tuple
    dates: tuple
    open: np.ndarray
    close: np.ndarray
    adj_open: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "dates", tuple(self.dates))
        n, t = len(self.instruments), len(self.dates)
        if n < 1 or t < 2:
            raise DataError(f"price panel needs N >= 1 and T >= 2, got N={n}, T={t}")
        for name in ("open", "close", "adj_open", "adj_close", "volume"):
            a = _frozen(getattr(self, name))
            if a.shape != (n, t):
                raise DataError(f"{name} has shape {a.shape}, expected {(n, t)}")
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")
            if name == "volume":
                if np.any(a < 0):
                    raise DataError("negative volume")
            elif np.any(a <= 0):
                raise DataError(f"non-positive price in {name}")
            object.__setattr__(self, name, a)

    @property
    def n(self) -> int:
        return len(self.instruments)

    @property
    def t(self) -> int:
        return len(self.dates)


def load_prices(path) -> PricePanel:
    """Read a long-format price CSV into a dense PricePanel.

    The header must contain the columns in ``PRICE_COLUMNS`` (any order,
    extra columns ignored). Each instrument must carry the same dates, in
    ascending order. Nothing is imputed: any malformed row, non-positive
    price or missing instrument-date cell raises DataError.
    """
    path = Path(path)
    rows: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in PRICE_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for rec in reader:
            line = reader.line_num
            if None in rec or any(rec.get(c) is None for c in PRICE_COLUMNS):
                raise DataError(f"{path}: malformed row at line {line}")
            inst = rec["instrument"].strip()
            date = rec["date"].strip()
            try:
                datetime.date.fromisoformat(date)
                vals = [float(rec[c]) for c in PRICE_COLUMNS[2:]]
            except ValueError as exc:
                raise DataError(f"{path}: malformed row at line {line}: {exc}") from None
            if not inst:
                raise DataError(f"{path}: empty instrument at line {line}")
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}: non-finite value at line {line}")
            if min(vals[:4]) <= 0:
                raise DataError(f"{path}: non-positive price at line {line}")
            if vals[4] < 0:
                raise DataError(f"{path}: negative volume at line {line}")
            series = rows.setdefault(inst, [])
            if series and date <= series[-1][0]:
                raise DataError(
                    f"{path}: dates for {inst} not strictly ascending at line {line}"
                )
            series.append((date, vals))
    if not rows:
        raise DataError(f"{path}: no data rows")

    instruments = list(rows)
    dates = [d for d, _ in rows[instruments[0]]]
    for inst in instruments[1:]:
        if [d for d, _ in rows[inst]] != dates:
            raise DataError(f"{path}: ragged panel, dates for {inst} differ from {instruments[0]}")
    data = np.array([[v for _, v in rows[inst]] for inst in instruments])  # N x T x 5
    return PricePanel(
        instruments=instruments,
        dates=dates,
        open=data[:, :, 0],
        close=data[:, :, 1],
        adj_open=data[:, :, 2],
        adj_close=data[:, :, 3],
        volume=data[:, :, 4],
    )


def write_prices(panel: PricePanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRICE_COLUMNS)
        for i, inst in enumerate(panel.instruments):
            for t, date in enumerate(panel.dates):
                w.writerow([
                    inst, date,
                    f"{panel.open[i, t]:.17g}", f"{panel.close[i, t]:.17g}",
                    f"{panel.adj_open[i, t]:.17g}", f"{panel.adj_close[i, t]:.17g}",
                    f"{panel.volume[i, t]:.17g}",
                ])


@dataclass(frozen=True)
class ReturnsPanel:
    """N x (M+1) returns, newest observation first.

    Rows with zero sample variance are rejected: they cannot be normalized
    and would make the correlation matrix undefined.
    """

    instruments: tuple
    values: np.ndarray
    date_labels: tuple = ()

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise DataError("returns must be a 2-d array")
        n, d = values.shape
        if n < 2 or d < 2:
            raise DataError(f"returns panel needs N >= 2 and M >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("returns contain non-finite values")
        instruments = tuple(self.instruments) if len(self.instruments) else tuple(range(n))
        if len(instruments) != n:
            raise DataError("instrument labels do not match the number of rows")
        labels = tuple(self.date_labels)
        if labels and len(labels) != d:
            raise DataError("date labels do not match the number of columns")
        spread = values.max(axis=1) - values.min(axis=1)
        scale = np.maximum(np.abs(values).max(axis=1), np.finfo(float).tiny)
        constant = np.flatnonzero(spread <= _CONSTANT_ROW_RTOL * scale)
        if constant.size:
            raise DataError(f"zero-variance returns for instrument {instruments[constant[0]]!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "instruments", instruments)
        object.__setattr__(self, "date_labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        """Number of observations minus one."""
        return self.values.shape[1] - 1


def close_to_close_returns(panel: PricePanel, window: int, end: int | None = None,
                           rows=None) -> ReturnsPanel:
    """Log close-to-close returns on fully adjusted closes.

    Takes the ``window`` most recent returns ending at chronological date
    index ``end`` (default: the last date); ``rows`` optionally restricts
    the instruments. Column 0 of the result is the return into ``end``.
    """
    end = panel.t - 1 if end is None else int(end)
    if window < 2:
        raise DataError("window must be at least 2 (M >= 1)")
    if end >= panel.t or end < window:
        raise DataError(
            f"window of {window} returns ending at date index {end} needs "
            f"{window + 1} closes; panel has {min(end, panel.t - 1) + 1}"
        )
    idx = np.arange(panel.n) if rows is None else np.asarray(rows)
    ac = panel.adj_close[idx, end - window:end + 1]
    r = np.log(ac[:, 1:] / ac[:, :-1])[:, ::-1]
    labels = tuple(panel.dates[end - s] for s in range(window))
    return ReturnsPanel(tuple(panel.instruments[i] for i in idx), r, labels)


def overnight_returns(panel: PricePanel, day: int | None = None) -> np.ndarray:
    """Previous-close-to-open log returns ln(adj_open_s / adj_close_{s+1}).

    With ``day`` (a chronological date index) returns the N-vector for that
    date; otherwise the N x (T-1) matrix newest-first.
    """
    if day is None:
        e = np.log(panel.adj_open[:, 1:] / panel.adj_close[:, :-1])
        return e[:, ::-1]
    day = int(day)
    if day <= 0 or day >= panel.t:
        raise DataError(f"no prior close for date index {day}")
    return np.log(panel.adj_open[:, day] / panel.adj_close[:, day - 1])


@dataclass(frozen=True)
class SampleMoments:
    """Serially demeaned returns and the derived sample moments.

    ``cov`` and ``cor`` are N x N and only materialized on first access.
    """

    x: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    instruments: tuple = ()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1] - 1

    @cached_property
    def cov(self) -> np.ndarray:
        c = self.x @ self.x.T / self.m
        c = 0.5 * (c + c.T)
        np.fill_diagonal(c, self.sigma**2)
        c.setflags(write=False)
        return c

    @cached_property
    def cor(self) -> np.ndarray:
        p = self.cov / np.outer(self.sigma, self.sigma)
        np.fill_diagonal(p, 1.0)
        p.setflags(write=False)
        return p


def compute_moments(returns: ReturnsPanel) -> SampleMoments:
    """Demean each row and normalize by the unbiased (1/M) standard deviation."""
    r = returns.values
    x = r - r.mean(axis=1, keepdims=True)
    m = r.shape[1] - 1
    sigma = np.sqrt(np.einsum("is,is->i", x, x) / m)
    return SampleMoments(_frozen(x), _frozen(sigma), _frozen(x / sigma[:, None]),
                         returns.instruments)


def phi_matrix(m: int) -> np.ndarray:
    """(delta_ss' + u_s u_s') / M: reproduces the covariance from the first M demeaned columns."""
    if m < 1:
        raise DataError("M must be at least 1")
    return (np.eye(m) + 1.0) / m


def write_returns_csv(returns: ReturnsPanel, path) -> None:
    """Long-format export, chronological order, 17 significant digits."""
    # unlabeled panels get zero-padded chronological labels, so sorting restores the order
    labels = returns.date_labels or tuple(f"obs{returns.m + 1 - s:06d}" for s in range(returns.m + 1))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RETURN_COLUMNS)
        for i, inst in enumerate(returns.instruments):
            for s in reversed(range(returns.m + 1)):
                w.writerow([inst, labels[s], f"{returns.values[i, s]:.17g}"])


def read_returns_csv(path) -> ReturnsPanel:
    """Inverse of write_returns_csv. Dates are sorted ascending, then reversed."""
    path = Path(path)
    cells: dict[str, dict[str, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in RETURN_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for rec in reader:
            try:
                inst, date, value = rec["instrument"].strip(), rec["date"].strip(), float(rec["value"])
            except (AttributeError, TypeError, ValueError):
                raise DataError(f"{path}: malformed row at line {reader.line_num}") from None
            row = cells.setdefault(inst, {})
            if date in row:
                raise DataError(f"{path}: duplicate cell ({inst}, {date}) at line {reader.line_num}")
            row[date] = value
    if not cells:
        raise DataError(f"{path}: no data rows")
    instruments = list(cells)
    dates = sorted(cells[instruments[0]])
    for inst in instruments:
        if sorted(cells[inst]) != dates:
            raise DataError(f"{path}: ragged panel, dates for {inst} differ")
    newest_first = dates[::-1]
    values = np.array([[cells[inst][d] for d in newest_first] for inst in instruments])
    return ReturnsPanel(instruments, values, newest_first)
