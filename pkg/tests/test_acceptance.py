"""Acceptance criteria 1-12, one test each.

Every test records a one-line verdict; the lines are printed together at the
end of the pytest run (see conftest.py) and when this file is run directly.
"""

from __future__ import annotations

import contextlib
import csv
import itertools
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from specrisk.backtest import BacktestConfig, run_backtest
from specrisk.eigen import dense_sym_eigen, eigen_no_iter, eigen_power, phi_cholesky
from specrisk.errors import InfeasibleError, ModelError
from specrisk.moments import close_to_close_returns, compute_moments, overnight_returns, phi_matrix
from specrisk.optimizer import (OptimizationRequest, optimize_bounded, optimize_unbounded,
                                regression_holdings, regression_inputs)
from specrisk.riskmodel import (FactorModel, build_alpha_beta_deformation, build_model,
                                build_shrinkage_diag, build_shrinkage_uniform, deformed_kernel,
                                fix_k_erank, fix_k_minimization, parse_method,
                                principal_components, truncate_pc, woodbury_inverse)
from specrisk.synthetic import synthetic_prices

from conftest import random_returns
from kselect_oracle import g_table, oracle_min_k
from qp_oracle import bounded_oracle

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(num: int, title: str):
    """Record PASS/FAIL for a criterion; the body fills ``detail`` and sets ``ok``."""
    state = {"ok": False, "detail": ""}
    start = time.perf_counter()
    try:
        yield state
    except Exception as exc:
        state["ok"] = False
        state["detail"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        verdict = "PASS" if state["ok"] else "FAIL"
        RESULTS[num] = (f"[{verdict}] {num:2d}. {title}: {state['detail']} "
                        f"({time.perf_counter() - start:.1f} s)")
    assert state["ok"], state["detail"]


def l1_rel(a, b):
    """Relative L1 difference of two holdings vectors (rows for 2-d input)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return np.abs(a - b).sum(axis=1) / np.abs(b).sum(axis=1)


def test_01_eigen_oracle_equivalence():
    with criterion(1, "eigen_no_iter vs dense eigensolve, 100 panels") as c:
        rng = np.random.default_rng(101)
        worst_val = worst_vec = 0.0
        elapsed = 0.0
        for case in range(100):
            n, m = int(rng.integers(20, 201)), int(rng.integers(3, 20))
            rets = random_returns(n, m, seed=int(rng.integers(1 << 31)), n_factors=4)
            t0 = time.perf_counter()
            es = eigen_no_iter(rets)
            elapsed += time.perf_counter() - t0
            ref = dense_sym_eigen(compute_moments(rets).cor)
            lam = ref.values[:m]
            worst_val = max(worst_val, np.max(np.abs(es.values - lam) / lam))
            v = ref.vectors[:, :m]
            v = v * np.sign(np.sum(v * es.vectors, axis=0))
            worst_vec = max(worst_vec, np.abs(es.vectors - v).max())
        c["ok"] = worst_val < 1e-9 and worst_vec < 1e-7 and elapsed < 5.0
        c["detail"] = (f"max rel eigenvalue err {worst_val:.2e} (< 1e-9), max eigenvector err "
                       f"{worst_vec:.2e} (< 1e-7), solver time {elapsed:.2f} s (< 5 s)")


def test_02_power_method_agreement():
    with criterion(2, "eigen_power vs eigen_no_iter, 20 panels, prec=1e-6") as c:
        rng = np.random.default_rng(202)
        worst = 0.0
        last_iters = []
        for case in range(20):
            n, m = int(rng.integers(50, 201)), int(rng.integers(3, 20))
            rets = random_returns(n, m, seed=int(rng.integers(1 << 31)), n_factors=4)
            es = eigen_power(rets, k=m, prec=1e-6, seed=case)
            ref = eigen_no_iter(rets)
            worst = max(worst, np.max(np.abs(es.values - ref.values) / ref.values))
            last_iters.append(int(es.iter_counts[-1]))
        c["ok"] = worst < 1e-3 and max(last_iters) <= 2
        c["detail"] = (f"max rel eigenvalue err {worst:.2e} (< 1e-3), iterations of the M-th "
                       f"pair <= {max(last_iters)} (<= 2)")


def test_03_cholesky_closed_form():
    with criterion(3, "phi_cholesky(M) phi_cholesky(M)^T = phi_matrix(M), M=1..50") as c:
        worst = max(np.abs(phi_cholesky(m) @ phi_cholesky(m).T - phi_matrix(m)).max()
                    for m in range(1, 51))
        c["ok"] = worst < 1e-14
        c["detail"] = f"max abs err {worst:.2e} (< 1e-14)"


def test_04_diagonal_reproduction():
    with criterion(4, "unit model diagonal, 50 panels x 4 constructions") as c:
        rng = np.random.default_rng(404)
        worst = 0.0
        built = 0
        for case in range(50):
            n, m = int(rng.integers(20, 150)), int(rng.integers(3, 20))
            mo = compute_moments(random_returns(n, m, seed=int(rng.integers(1 << 31))))
            eigs = principal_components(mo)
            q = float(rng.uniform(0.05, 0.95))
            models = [truncate_pc(eigs, fix_k_minimization(eigs).k),
                      build_shrinkage_diag(mo, q),
                      build_shrinkage_uniform(mo, q, float(rng.uniform(0.0, 0.5))),
                      build_alpha_beta_deformation(mo, 0.8, 0.6)]
            for model in models:
                worst = max(worst, np.abs(np.diag(model.cov_mat) - 1).max())
                built += 1
        c["ok"] = worst < 1e-10 and built == 200
        c["detail"] = f"{built} models, max |Gamma_ii - 1| = {worst:.2e} (< 1e-10)"


def test_05_deformation_identity():
    with criterion(5, "truncate_pc(K) = diag(xi^2) + Y phi~ Y^T, all K < M") as c:
        rng = np.random.default_rng(505)
        worst = 0.0
        checked = unbuildable = 0
        for case in range(30):
            n, m = int(rng.integers(13, 101)), int(rng.integers(3, 13))
            mo = compute_moments(random_returns(n, m, seed=int(rng.integers(1 << 31))))
            eigs = principal_components(mo)
            y = mo.y[:, :m]
            for k in range(1, m):
                factor = y @ deformed_kernel(mo, k) @ y.T
                gamma_def = np.diag(1 - np.diag(factor)) + factor
                try:
                    gamma_pc = np.array(truncate_pc(eigs, k).cov_mat)
                except ModelError:
                    # some xi^2 <= 0: compare the unconstrained algebra instead
                    load = eigs.vectors[:, :k] * np.sqrt(eigs.values[:k])
                    gamma_pc = np.diag(1 - np.sum(load**2, axis=1)) + load @ load.T
                    unbuildable += 1
                worst = max(worst, np.abs(gamma_pc - gamma_def).max())
                checked += 1
        c["ok"] = worst < 1e-9
        c["detail"] = (f"{checked} (panel, K) pairs ({unbuildable} with xi^2 <= 0 compared "
                       f"algebraically), max abs diff {worst:.2e} (< 1e-9)")


def test_06_inverse_correctness():
    with criterion(6, "Gamma . woodbury_inverse = I, 50 factor models") as c:
        rng = np.random.default_rng(606)
        worst = 0.0
        for case in range(50):
            n, k = int(rng.integers(5, 201)), int(rng.integers(0, 21))
            k = min(k, n - 1)
            xi = rng.uniform(0.3, 1.5, n)
            w = rng.standard_normal((n, k))
            a = rng.standard_normal((k, k))
            phi = a @ a.T / max(k, 1) + 0.05 * np.eye(k)
            gamma = np.diag(xi**2) + w @ phi @ w.T
            worst = max(worst, np.abs(gamma @ woodbury_inverse(xi, w, phi) - np.eye(n)).max())
        c["ok"] = worst < 1e-8
        c["detail"] = f"max |Gamma Gamma^-1 - I| = {worst:.2e} (< 1e-8)"


def test_07_k_selection_oracles():
    with criterion(7, "fix_k_minimization vs g(K) table (50 panels), eRank hand values") as c:
        rng = np.random.default_rng(707)
        mismatches = 0
        ks = []
        for case in range(50):
            n, m = int(rng.integers(20, 150)), int(rng.integers(3, 20))
            mo = compute_moments(random_returns(n, m, seed=int(rng.integers(1 << 31)),
                                                n_factors=int(rng.integers(1, 6))))
            excl = bool(case % 2)
            sel = fix_k_minimization(principal_components(mo), excl_first=excl)
            ref = oracle_min_k(g_table(mo.cor, excl_first=excl), m)
            mismatches += sel.k != ref
            ks.append(sel.k)
        hand = (fix_k_erank([1.0, 1.0, 1.0, 1.0]).k, fix_k_erank([3.0, 1.0]).k,
                fix_k_erank([3.0, 1.0], "floor").k)
        c["ok"] = mismatches == 0 and hand == (4, 2, 1)
        c["detail"] = (f"{50 - mismatches}/50 minimization matches (K range {min(ks)}..{max(ks)}); "
                       f"eRank (1,1,1,1)->{hand[0]}, (3,1)->round {hand[1]} / floor {hand[2]}")


def _random_model(rng, n, k):
    return FactorModel(rng.uniform(0.5, 1.5, n), rng.standard_normal((n, k)), np.eye(k),
                       mode="covariance")


def test_08_optimizer_neutrality_budget_oracle():
    with criterion(8, "neutrality/budget on every output; bounded vs QP oracle, 200 cases") as c:
        rng = np.random.default_rng(808)
        outputs = []
        # bounded suite, N <= 6, checked against the exhaustive active-set oracle
        worst = 0.0
        solved = infeasible = binding = 0
        for case in range(200):
            n, k = int(rng.integers(2, 7)), int(rng.integers(0, 3))
            model = _random_model(rng, n, k)
            e = rng.standard_normal(n)
            free = optimize_unbounded(OptimizationRequest(e, model, 1.0)).h
            if case % 10 == 0 and n % 2 == 0:
                b = np.full(n, 1.0 / n)
            else:
                b = np.abs(free) * rng.uniform(0.4, 1.0, n) + rng.uniform(0.0, 0.1, n)
                b *= max(1.0, 1.2 / b.sum())
            gamma = np.array(model.cov_mat)
            try:
                res = optimize_bounded(OptimizationRequest(e, model, 1.0, b))
            except InfeasibleError:
                # must agree that no kappa reaches the budget
                with pytest.raises(RuntimeError, match="unreachable"):
                    bounded_oracle(gamma, e, np.ones((n, 1)), b, 1.0)
                infeasible += 1
                continue
            ref = bounded_oracle(gamma, e, np.ones((n, 1)), b, 1.0)
            scale = np.abs(ref).max()
            worst = max(worst, np.abs(res.h - ref).max() / scale)
            binding += bool(res.binding)
            solved += 1
            outputs.append((res.h, 1.0, b))
        # unbounded and regression outputs on larger random instances
        for case in range(100):
            n, k = int(rng.integers(3, 300)), int(rng.integers(0, 10))
            k = min(k, n - 2)
            model = _random_model(rng, n, k)
            e = rng.standard_normal(n)
            outputs.append((optimize_unbounded(OptimizationRequest(e, model, 2e7)).h, 2e7, None))
            load, w = regression_inputs(model)
            outputs.append((regression_holdings(e, load, w, 2e7, bool(case % 2)).h, 2e7, None))
        # every day of a bounded synthetic backtest
        panel = synthetic_prices(200, 80, seed=8)
        cfg = BacktestConfig(method="min", top_n=200, bounds=True, bound_frac=0.01)
        rep = run_backtest(panel, cfg)
        outputs.extend((h, cfg.investment, None) for h in rep.holdings)
        neutral = max(abs(h.sum()) / inv for h, inv, _ in outputs)
        budget = max(abs(np.abs(h).sum() - inv) / inv for h, inv, _ in outputs)
        bounds_ok = all(np.all(np.abs(h) <= b + 1e-10 * inv) for h, inv, b in outputs if b is not None)
        c["ok"] = (neutral < 1e-8 and budget < 1e-8 and bounds_ok and worst < 1e-6
                   and solved + infeasible == 200)
        c["detail"] = (f"{len(outputs)} outputs: max |sum H|/I {neutral:.1e}, max budget err "
                       f"{budget:.1e} (< 1e-8); oracle: {solved} solved ({binding} with binding "
                       f"bounds) max rel err {worst:.1e} (< 1e-6), {infeasible} infeasible, "
                       "confirmed by the oracle")


def test_09_optimization_vs_regression():
    with criterion(9, "regression_holdings vs optimize_unbounded, N=1000, shrinkage q=0.5") as c:
        with_icpt, plain = [], []
        for seed in range(5):
            panel = synthetic_prices(1000, 40, seed=seed)
            for day in (22, 28, 34):
                rets = close_to_close_returns(panel, 21, day - 1)
                model = build_model(compute_moments(rets), parse_method("shrink:0.5"))
                e = overnight_returns(panel, day)
                opt = optimize_unbounded(OptimizationRequest(e, model, 2e7)).h
                load, w = regression_inputs(model)
                with_icpt.append(l1_rel(regression_holdings(e, load, w, 2e7, True).h, opt)[0])
                plain.append(l1_rel(regression_holdings(e, load, w, 2e7, False).h, opt)[0])
        c["ok"] = max(with_icpt) < 0.02
        c["detail"] = (f"weighted residuals (intercept) max rel L1 {max(with_icpt):.3%} (< 2%); "
                       f"two-step no-intercept + demean variant max {max(plain):.1%} "
                       "(informational)")


def test_10_q_insensitivity():
    with criterion(10, "q in {1e-6,0.3,0.6,0.9}: ROC spread, pairwise holdings L1") as c:
        n = 10000
        panel = synthetic_prices(n, 150, seed=3)
        reps = {q: run_backtest(panel, BacktestConfig(method=f"shrink:{q}", top_n=n, bounds=True))
                for q in (1e-6, 0.3, 0.6, 0.9)}
        rocs = [100 * r.roc for r in reps.values()]
        spread = max(rocs) - min(rocs)
        worst = max(l1_rel(reps[a].holdings, reps[b].holdings).max()
                    for a, b in itertools.combinations(reps, 2))
        c["ok"] = spread < 0.1 and worst < 0.01
        c["detail"] = (f"N={n}, {len(panel.dates) - 22} days, bounded: ROC {min(rocs):.3f}..."
                       f"{max(rocs):.3f}% (spread {spread:.4f} pp < 0.1), max pairwise daily L1 "
                       f"{worst:.3%} (< 1%)")


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "specrisk.cli", *args], capture_output=True,
                          text=True, env={**os.environ, "PYTHONHASHSEED": "0"})


def test_11_end_to_end_determinism(tmp_path):
    with criterion(11, "byte-identical report.json; N=500 x 250-day backtest < 60 s") as c:
        prices = tmp_path / "prices.csv"
        run = _cli("synth", "--n", "500", "--days", "250", "--seed", "11", "--out", str(prices))
        assert run.returncode == 0, run.stderr
        cfg = tmp_path / "run.cfg"
        cfg.write_text("method = min\ntop_n = 500\nbounds = true\nbound_frac = 0.01\n")
        times = []
        for out in ("a", "b"):
            t0 = time.perf_counter()
            run = _cli("backtest", "--prices", str(prices), "--config", str(cfg), "--out",
                       str(tmp_path / out))
            times.append(time.perf_counter() - t0)
            assert run.returncode == 0, run.stderr
        same = (tmp_path / "a" / "report.json").read_bytes() == \
            (tmp_path / "b" / "report.json").read_bytes()
        same_daily = (tmp_path / "a" / "daily.csv").read_bytes() == \
            (tmp_path / "b" / "daily.csv").read_bytes()
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        c["ok"] = same and same_daily and max(times) < 60 and report["days"] == 250 - 22
        c["detail"] = (f"report.json identical: {same}, daily.csv identical: {same_daily}; "
                       f"{report['days']} trading days in {max(times):.1f} s (< 60 s)")


def test_12_sweep_shape_and_unit_xi(tmp_path):
    with criterion(12, "sweep K=1..M-1 CSV shape; unit-xi K=M vs shrinkage q=0.9 holdings") as c:
        prices = tmp_path / "prices.csv"
        assert _cli("synth", "--n", "300", "--days", "60", "--seed", "12", "--out",
                    str(prices)).returncode == 0
        cfg = tmp_path / "run.cfg"
        cfg.write_text("top_n = 300\nwindow = 21\n")
        run = _cli("sweep", "--prices", str(prices), "--config", str(cfg), "--out",
                   str(tmp_path / "sweep"))
        assert run.returncode == 0, run.stderr
        with open(tmp_path / "sweep" / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        shape_ok = (rows[0] == ["K", "ROC", "SR", "CPS"]
                    and [int(r[0]) for r in rows[1:]] == list(range(1, 20))
                    and all(len(r) == 4 for r in rows))
        n = 10000
        panel = synthetic_prices(n, 150, seed=3)
        unit = run_backtest(panel, BacktestConfig(method="unitxi:20", top_n=n, bounds=True))
        shrink = run_backtest(panel, BacktestConfig(method="shrink:0.9", top_n=n, bounds=True))
        worst = l1_rel(unit.holdings, shrink.holdings).max()
        c["ok"] = shape_ok and worst < 0.02
        c["detail"] = (f"sweep.csv header {rows[0]} with {len(rows) - 1} rows K=1..19: "
                       f"{shape_ok}; N={n} bounded backtest, max daily L1 {worst:.3%} (< 2%)")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q"])
    sys.exit(code)
