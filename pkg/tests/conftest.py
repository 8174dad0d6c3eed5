from __future__ import annotations

import numpy as np
import pytest

from specrisk.moments import PricePanel, ReturnsPanel, compute_moments


def random_returns(n: int, m: int, seed: int, n_factors: int = 3) -> ReturnsPanel:
    """Correlated Gaussian returns, N x (M+1)."""
    rng = np.random.default_rng(seed)
    load = rng.standard_normal((n, n_factors))
    f = rng.standard_normal((n_factors, m + 1))
    vol = rng.uniform(0.5, 2.0, size=(n, 1))
    r = 0.01 * vol * (load @ f + rng.standard_normal((n, m + 1)))
    return ReturnsPanel(tuple(f"I{i:03d}" for i in range(n)), r)


def random_moments(n: int, m: int, seed: int):
    return compute_moments(random_returns(n, m, seed))


def make_panel(n: int, t: int, seed: int = 0) -> PricePanel:
    rng = np.random.default_rng(seed)
    close = 50 * np.exp(np.cumsum(0.01 * rng.standard_normal((n, t)), axis=1))
    open_ = close * np.exp(0.005 * rng.standard_normal((n, t)))
    vol = rng.integers(1_000, 100_000, size=(n, t)).astype(float)
    dates = [f"2020-01-{d + 1:02d}" if d < 31 else f"2020-02-{d - 30:02d}" for d in range(t)]
    return PricePanel(tuple(f"S{i}" for i in range(n)), dates, open_, close, open_, close, vol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
    passed = sum(line.startswith("[PASS]") for line in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
