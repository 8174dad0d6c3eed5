"""Command-line interface: ``specrisk {eigen,model,optimize,backtest,sweep,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backtest import BacktestConfig, BacktestReport, run_backtest
from .eigen import eigen_no_iter, eigen_power
from .errors import BacktestError, ConfigError, DataError, NumericalError, SpecriskError
from .moments import (close_to_close_returns, compute_moments, load_prices, read_returns_csv,
                      write_prices)
from .optimizer import OptimizationRequest, optimize, regression_holdings, regression_inputs
from .riskmodel import build_model, load_model, parse_method, save_model

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
SWEEP_VARIANTS = {"pc": "fixed", "full_factors_k_xi": "fullfactors", "k_factors_unit_xi": "unitxi"}


def _g(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------- config


def _parse_value(text: str):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def read_config(path) -> dict:
    """Key-value config (``key = value``, ``#`` comments), or JSON for ``.json`` files."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return data
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


_BOOL_FIELDS = {f.name for f in dataclasses.fields(BacktestConfig) if f.type in ("bool", bool)}


def backtest_config(values: dict) -> BacktestConfig:
    names = {f.name: f for f in dataclasses.fields(BacktestConfig)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = {}
    for key, value in values.items():
        if key in _BOOL_FIELDS and not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be true or false")
        if key in ("window", "top_n", "addv_days", "block", "start", "days"):
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"config key {key!r} must be an integer")
        if key in ("investment", "bound_frac"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
            value = float(value)
        if key == "method":
            value = str(value)
        clean[key] = value
    return BacktestConfig(**clean)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output path is not a directory: {p}")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_vector(path, instruments, what: str) -> np.ndarray:
    values = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DataError(f"{path}: expected a header 'instrument,value'")
        for rec in reader:
            if not rec:
                continue
            if len(rec) < 2:
                raise DataError(f"{path}: malformed row at line {reader.line_num}")
            try:
                values[rec[0].strip()] = float(rec[1])
            except ValueError:
                raise DataError(f"{path}: malformed row at line {reader.line_num}") from None
    missing = [i for i in instruments if str(i) not in values]
    if missing:
        raise DataError(f"{path}: {what} missing for instrument {missing[0]!r}")
    return np.array([values[str(i)] for i in instruments])


def _load_returns(args):
    if args.returns:
        return read_returns_csv(_require_file(args.returns, "returns file"))
    if args.prices:
        panel = load_prices(_require_file(args.prices, "price file"))
        return close_to_close_returns(panel, args.window)
    raise ConfigError("one of --returns or --prices is required")


# ---------------------------------------------------------------- commands


def cmd_eigen(args) -> None:
    rets = _load_returns(args)
    if args.method == "noiter":
        es = eigen_no_iter(rets, use_cor=not args.use_cov)
        if args.k:
            es = dataclasses.replace(es, values=es.values[:args.k], vectors=es.vectors[:, :args.k])
    else:
        es = eigen_power(rets, args.k or rets.m, prec=args.prec, seed=args.seed,
                         max_iter=args.max_iter, use_cor=not args.use_cov)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "eigenvalue", "iterations"])
        for a, lam in enumerate(es.values):
            it = "" if es.iter_counts is None else int(es.iter_counts[a])
            w.writerow([a + 1, _g(lam), it])
        if es.iter_counts is not None:
            w.writerow(["total", "", int(es.iter_counts.sum())])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_model(args) -> None:
    spec = parse_method(args.method, args.excl_first, args.use_cov, args.floor)
    rets = _load_returns(args)
    out = _out_dir(args.out)
    model = build_model(compute_moments(rets), spec)
    save_model(model, out / "model.json")
    with (out / "loadings.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instrument"] + [f"f{a + 1}" for a in range(model.k)])
        for i, inst in enumerate(model.instruments):
            w.writerow([inst] + [_g(x) for x in model.fac_load[i]])
    with (out / "spec_risk.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instrument", "spec_risk"])
        for inst, x in zip(model.instruments, model.spec_risk):
            w.writerow([inst, _g(x)])
    diag = {"method": spec.describe(), "excl_first": spec.excl_first, "use_cor": spec.use_cor,
            "variant": model.variant, "conforming": model.conforming, "k": model.k,
            "n": model.n, "m": rets.m}
    if model.selection is not None:
        sel = model.selection.diagnostics
        if "g_trace" in sel:
            diag["g_trace"] = [{"k": k, "g": g} for k, g in sel["g_trace"]]
        if "entropy" in sel:
            diag["entropy"], diag["erank"] = sel["entropy"], sel["erank"]
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")


def cmd_optimize(args) -> None:
    model = load_model(_require_file(args.model, "model file"))
    alpha_path = _require_file(args.alpha, "alpha file")
    bounds_path = _require_file(args.bounds, "bounds file") if args.bounds else None
    if args.intercept and not args.regression:
        raise ConfigError("--intercept requires --regression")
    e = _read_vector(alpha_path, model.instruments, "expected return")
    bounds = _read_vector(bounds_path, model.instruments, "bound") if bounds_path else None
    if args.regression:
        loads, weights = regression_inputs(model)
        hold = regression_holdings(e, loads, weights, args.budget, args.intercept, bounds,
                                   not args.momentum)
    else:
        hold = optimize(OptimizationRequest(e, model, args.budget, bounds, not args.momentum))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instrument", "holding"])
        for inst, h in zip(model.instruments, hold.h):
            w.writerow([inst, _g(h)])
    finally:
        if fh is not sys.stdout:
            fh.close()


def write_report(report: BacktestReport, out: Path) -> None:
    doc = report.summary()
    doc["block_k"] = list(report.block_k)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with (out / "daily.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "pnl", "shares", "zeta"])
        for d, p, s, z in zip(report.dates, report.daily_pnl, report.daily_shares, report.zeta):
            w.writerow([d, _g(p), _g(s), _g(z)])
    with (out / "holdings.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "instrument", "holding"])
        for t, d in enumerate(report.dates):
            row = report.holdings[t]
            for i in np.flatnonzero(row):
                w.writerow([d, report.instruments[i], _g(row[i])])


def cmd_backtest(args) -> None:
    prices = _require_file(args.prices, "price file")
    config = backtest_config(read_config(args.config))
    out = _out_dir(args.out)
    report = run_backtest(load_prices(prices), config)
    write_report(report, out)


def parse_k_range(text: str) -> list[int]:
    """``a..b``, ``a-b`` or a comma list of integers."""
    text = str(text).strip()
    try:
        for sep in ("..", "-"):
            if sep in text:
                lo, hi = (int(x) for x in text.split(sep, 1))
                if lo > hi:
                    raise ValueError
                return list(range(lo, hi + 1))
        return sorted({int(x) for x in text.split(",")})
    except ValueError:
        raise ConfigError(f"invalid K range {text!r}") from None


def _sweep_one(job):
    panel, config, k = job
    rep = run_backtest(panel, config)
    return k, rep.roc, rep.sr, rep.cps


def _workers() -> int:
    env = os.environ.get("SPECRISK_THREADS")
    if env is None:
        return max(1, os.cpu_count() or 1)
    try:
        n = int(env)
    except ValueError:
        raise ConfigError("SPECRISK_THREADS must be a positive integer") from None
    if n < 1:
        raise ConfigError("SPECRISK_THREADS must be a positive integer")
    return n


def sweep_fixed_k(panel, config: BacktestConfig, k_range, variant: str = "pc",
                  workers: int = 1) -> list[tuple]:
    """One backtest per K; rows (K, ROC, SR, CPS) in ascending K."""
    if variant not in SWEEP_VARIANTS:
        raise ConfigError(f"unknown sweep variant {variant!r}")
    kind = SWEEP_VARIANTS[variant]
    jobs = [(panel, dataclasses.replace(config, method=f"{kind}:{k}", excl_first=False,
                                        floor=False), k) for k in sorted(k_range)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    return sorted(rows)


def cmd_sweep(args) -> None:
    prices = _require_file(args.prices, "price file")
    config = backtest_config(read_config(args.config))
    ks = parse_k_range(args.k_range) if args.k_range else list(range(1, config.window - 1))
    out = _out_dir(args.out)
    rows = sweep_fixed_k(load_prices(prices), config, ks, args.variant, _workers())
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "ROC", "SR", "CPS"])
        for k, roc, sr, cps in rows:
            w.writerow([k, f"{100 * roc:.2f}", f"{sr:.2f}", f"{cps:.2f}"])
    with (out / "sr_vs_k.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "SR"])
        for k, _, sr, _ in rows:
            w.writerow([k, _g(sr)])
    doc = {"variant": args.variant, "k": [r[0] for r in rows], "config": config.to_dict(),
           "rows": [{"k": k, "roc": roc, "sr": sr, "cps": cps} for k, roc, sr, cps in rows]}
    (out / "sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> None:
    from .synthetic import synthetic_prices

    panel = synthetic_prices(args.n, args.days, n_factors=args.factors, seed=args.seed,
                             reversion=args.reversion)
    write_prices(panel, args.out)


# ---------------------------------------------------------------- parser


def _add_returns_source(p) -> None:
    src = p.add_argument_group("input (one of)")
    src.add_argument("--returns", help="long-format returns CSV (instrument,date,value)")
    src.add_argument("--prices", help="price CSV; close-to-close returns are taken from it")
    src.add_argument("--window", type=int, default=21,
                     help="number of returns (M+1) taken from --prices (default 21)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specrisk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eigen", help="principal components of the sample correlation matrix")
    _add_returns_source(p)
    p.add_argument("--method", choices=("noiter", "power"), default="noiter")
    p.add_argument("--k", type=int, default=0, help="number of components (default: all M)")
    p.add_argument("--prec", type=float, default=1e-3, help="power-method precision (default 1e-3)")
    p.add_argument("--seed", type=int, default=None, help="seed for power-method start vectors")
    p.add_argument("--max-iter", type=int, default=1_000_000, help="iteration cap per component")
    p.add_argument("--use-cov", action="store_true", help="use the covariance matrix instead")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_eigen)

    p = sub.add_parser("model", help="build a risk model")
    _add_returns_source(p)
    p.add_argument("--method", default="min",
                   help="min | erank | fixed:K | shrink:q | shrinkrho:q,rho | alphabeta:a,b | "
                        "fullfactors:K | unitxi:K (default min)")
    p.add_argument("--excl-first", action="store_true",
                   help="pin the first component and select K on the rest")
    p.add_argument("--floor", action="store_true", help="eRank rounding by floor instead of round")
    p.add_argument("--use-cov", action="store_true",
                   help="model the covariance matrix directly (PC methods only)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("optimize", help="dollar-neutral holdings from expected returns")
    p.add_argument("--alpha", required=True, help="CSV instrument,expected_return")
    p.add_argument("--model", required=True, help="model.json written by 'specrisk model'")
    p.add_argument("--budget", type=float, required=True, help="investment level I (sum |H|)")
    p.add_argument("--bounds", help="CSV instrument,bound with |H_i| <= bound")
    p.add_argument("--regression", action="store_true", help="weighted-regression holdings")
    p.add_argument("--intercept", action="store_true", help="regression with intercept")
    p.add_argument("--momentum", action="store_true",
                   help="hold along +E instead of the default mean-reversion sign")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("backtest", help="intraday backtest")
    p.add_argument("--prices", required=True, help="price CSV")
    p.add_argument("--config", required=True, help="key = value (or .json) config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("sweep", help="backtests over a range of fixed K")
    p.add_argument("--prices", required=True, help="price CSV")
    p.add_argument("--config", required=True, help="backtest config; its method is overridden")
    p.add_argument("--k-range", help="e.g. 1..19 (default 1..M-1)")
    p.add_argument("--variant", choices=tuple(SWEEP_VARIANTS), default="pc",
                   help="pc: truncated PCs; full_factors_k_xi: all M factors with K-factor "
                        "specific risk; k_factors_unit_xi: K factors with unit specific risk")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a seeded synthetic price panel")
    p.add_argument("--n", type=int, default=500, help="number of instruments")
    p.add_argument("--days", type=int, default=300, help="number of trading days")
    p.add_argument("--factors", type=int, default=5, help="number of latent factors")
    p.add_argument("--reversion", type=float, default=0.3,
                   help="fraction of the idiosyncratic overnight move reverted intraday")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output price CSV")
    p.set_defaults(func=cmd_synth)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, BacktestError) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SpecriskError as exc:
        print(f"specrisk {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"specrisk {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
