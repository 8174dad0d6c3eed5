"""Dollar-neutral Sharpe-maximizing holdings.

Unbounded problem: the closed form

    H = -eta [G^-1 E - G^-1 u (u^T G^-1 E) / (u^T G^-1 u)],   sum |H| = I,

evaluated with Woodbury mat-vecs only.

Bounded problem (|H_i| <= B_i): solved as the mean-variance QP

    min  1/2 H^T G H + kappa E^T H   s.t.  A^T H = 0,  -B <= H <= B,

with kappa > 0 tuned so that sum |H| = I. Without binding bounds this is
the unbounded solution, so the two agree when the bounds are slack. For a
fixed active set H is affine in kappa, so the solution path is followed
from kappa = 0 one active set at a time and the budget equation is solved
exactly on each segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError, InfeasibleError, NumericalError
from .riskmodel import FactorModel

_BUDGET_RTOL = 1e-11
# KKT gradient tolerance: relative to the linear term kappa*E, plus a
# round-off allowance eps * cond(G) * |G||H|, which dominates for
# near-singular models (e.g. shrinkage with tiny q)
_GRAD_RTOL = 1e-9


def _grad_tol(quad, h0, h1, kappa, e):
    scale = quad.matvec_abs_bound(h0) + kappa * quad.matvec_abs_bound(h1)
    return _GRAD_RTOL * kappa * np.abs(e).max() + 16 * np.finfo(float).eps * quad.cond * scale


@dataclass(frozen=True)
class Holdings:
    """Dollar holdings; ``binding`` lists instruments sitting at a bound."""

    h: np.ndarray
    eta: float
    binding: tuple = ()


@dataclass(frozen=True)
class OptimizationRequest:
    expected_returns: np.ndarray
    model: FactorModel
    investment: float
    bounds: np.ndarray | None = None
    mean_reversion: bool = True

    def __post_init__(self):
        e = np.asarray(self.expected_returns, dtype=float)
        if e.shape != (self.model.n,):
            raise DataError(f"expected returns have shape {e.shape}, model has N={self.model.n}")
        if not np.all(np.isfinite(e)):
            raise DataError("expected returns contain non-finite values")
        if not self.investment > 0:
            raise ConfigError("investment level must be positive")
        object.__setattr__(self, "expected_returns", e)
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.shape != e.shape or not np.all(b >= 0):
                raise ConfigError("bounds must be a non-negative N-vector")
            if b.sum() < self.investment * (1 - 1e-12):
                raise InfeasibleError(f"bounds sum to {b.sum():.6g} < investment {self.investment:.6g}")
            object.__setattr__(self, "bounds", b)


def _check_direction(e) -> None:
    spread = e.max() - e.min()
    if not spread > 1e-14 * max(np.abs(e).max(), np.finfo(float).tiny):
        raise DataError("expected returns are constant across instruments: no direction")


def optimize_unbounded(req: OptimizationRequest) -> Holdings:
    e = req.expected_returns if req.mean_reversion else -req.expected_returns
    _check_direction(e)
    n = e.shape[0]
    z = req.model.inv_apply(np.column_stack([e, np.ones(n)]))
    ge, gu = z[:, 0], z[:, 1]
    denom = gu.sum()
    if not abs(denom) > 0:
        raise NumericalError("u^T G^-1 u vanishes")
    raw = ge - gu * (ge.sum() / denom)
    l1 = np.abs(raw).sum()
    if not l1 > 1e-300:
        raise NumericalError("optimal direction vanishes")
    eta = req.investment / l1
    h = -eta * raw
    return Holdings(h, eta)


class _DiagPlusLowRank:
    """G = diag(d) + W Phi W^T with restricted solves through Woodbury."""

    def __init__(self, d, w, phi):
        self.d = np.asarray(d, dtype=float)
        self.w = np.asarray(w, dtype=float).reshape(self.d.shape[0], -1)
        self.phi = np.asarray(phi, dtype=float).reshape(self.w.shape[1], self.w.shape[1])
        # upper estimate of cond(G) for positive semi-definite phi
        top = self.d.max() + np.linalg.norm(self.phi, 2) * np.sum(self.w**2) if self.w.size else self.d.max()
        self.cond = float(top / self.d.min())

    def matvec(self, h):
        return self.d * h + self.w @ (self.phi @ (self.w.T @ h))

    def matvec_abs_bound(self, h):
        """Entrywise bound on |G||h|, the scale of round-off in G @ h."""
        ah = np.abs(h)
        aw = np.abs(self.w)
        return self.d * ah + aw @ (np.abs(self.phi) @ (aw.T @ ah))

    def cross(self, f, c, h_c):
        """G[f][:, c] @ h_c (the diagonal contributes nothing off the block)."""
        return self.w[f] @ (self.phi @ (self.w[c].T @ h_c))

    def solve_sub(self, f, rhs):
        d_inv = 1.0 / self.d[f]
        rd = d_inv[:, None] * rhs
        if self.w.shape[1] == 0:
            return rd
        wd = d_inv[:, None] * self.w[f]
        inner = np.eye(self.w.shape[1]) + self.phi @ (self.w[f].T @ wd)
        return rd - wd @ np.linalg.solve(inner, self.phi @ (wd.T @ rhs))


def _affine_solution(quad, e, a, b, status):
    """Stationary point on the free set for a fixed active set, as H0 + kappa H1.

    Returns (h0, h1, g0, g1): holdings and objective gradients
    (G H + kappa E + A nu), all affine in kappa. None when the equality
    constraints cannot be met by the free variables.
    """
    n, p = a.shape
    free = status == 0
    fixed = ~free
    h_c = status[fixed] * b[fixed]
    f_idx = np.flatnonzero(free)
    h0 = np.zeros(n)
    h1 = np.zeros(n)
    h0[fixed] = h_c
    a_f = a[free]
    a_c = a[fixed]
    if f_idx.size < p:
        return None
    r0 = quad.cross(free, fixed, h_c)
    sol = quad.solve_sub(free, np.column_stack([r0, e[free], a_f]))
    s0, s1, sa = sol[:, 0], sol[:, 1], sol[:, 2:]
    schur = a_f.T @ sa
    try:
        if np.linalg.cond(schur) > 1e12:
            return None
        nu = np.linalg.solve(schur, np.column_stack([a_c.T @ h_c - a_f.T @ s0, -a_f.T @ s1]))
    except np.linalg.LinAlgError:
        return None
    h0[free] = -(s0 + sa @ nu[:, 0])
    h1[free] = -(s1 + sa @ nu[:, 1])
    g0 = quad.matvec(h0) + a @ nu[:, 0]
    g1 = quad.matvec(h1) + e + a @ nu[:, 1]
    return h0, h1, g0, g1


def _pdas(quad, e, a, b, kappa, status, max_iter=100):
    """Primal-dual active set iterations at fixed kappa; None if they stall."""
    pinned = b == 0
    for _ in range(max_iter):
        sol = _affine_solution(quad, e, a, b, status)
        if sol is None:
            return None
        h0, h1, g0, g1 = sol
        h = h0 + kappa * h1
        g = g0 + kappa * g1
        gtol = _grad_tol(quad, h0, h1, kappa, e)
        htol = 1e-12 * max(b.max(), 1e-300)
        new = status.copy()
        free = status == 0
        new[free & (h > b + htol)] = 1
        new[free & (h < -b - htol)] = -1
        new[(status == 1) & (g > gtol) & ~pinned] = 0
        new[(status == -1) & (g < -gtol) & ~pinned] = 0
        if np.array_equal(new, status):
            return status, sol
        status = new
    return None


def _primal_active_set(quad, e, a, b, kappa, max_iter=None):
    """Feasible-point active-set method started from H = 0 (always feasible)."""
    n = e.shape[0]
    pinned = b == 0
    status = np.where(pinned, 1, 0)
    h = np.zeros(n)
    max_iter = max_iter or 10 * n + 100
    for _ in range(max_iter):
        sol = _affine_solution(quad, e, a, b, status)
        if sol is None:
            raise NumericalError("active-set subproblem is singular")
        h0, h1, g0, g1 = sol
        target = h0 + kappa * h1
        step = target - h
        free = status == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(step > 0, (b - h) / step, np.where(step < 0, (-b - h) / step, np.inf))
        room[~free] = np.inf
        j = int(np.argmin(room))
        if room[j] < 1.0:
            h = h + room[j] * step
            status[j] = 1 if step[j] > 0 else -1
            h[j] = status[j] * b[j]
            continue
        h = target
        g = g0 + kappa * g1
        viol = np.where(status == 1, g, np.where(status == -1, -g, -np.inf)) - _grad_tol(quad, h0, h1, kappa, e)
        viol[pinned] = -np.inf
        j = int(np.argmax(viol))
        if viol[j] <= 0:
            return status, sol
        status[j] = 0
    raise ConvergenceError("bounded optimization: active-set iterations exhausted")


def _solve_at(quad, e, a, b, kappa, status):
    res = _pdas(quad, e, a, b, kappa, status)
    if res is None:
        res = _primal_active_set(quad, e, a, b, kappa)
    return res


def _limit_solution(e, a, b):
    """kappa -> infinity: the linear program min E^T H over the constraint set."""
    from scipy.optimize import linprog

    res = linprog(e, A_eq=a.T, b_eq=np.zeros(a.shape[1]), bounds=np.column_stack([-b, b]),
                  method="highs")
    if res.status != 0:
        raise InfeasibleError(f"bounded problem infeasible: {res.message}")
    return res.x


def _first_crossing(h0, h1, lo, hi, level):
    """Smallest kappa in [lo, hi] with sum|h0 + kappa h1| = level, or None.

    The left side is convex piecewise linear in kappa, so it suffices to
    walk its kinks in order.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        kinks = -h0 / h1
    kinks = np.sort(kinks[np.isfinite(kinks) & (kinks > lo) & (kinks < hi)])
    pts = np.concatenate([[lo], kinks] + ([[hi]] if np.isfinite(hi) else []))
    f = np.abs(h0[None, :] + pts[:, None] * h1[None, :]).sum(axis=1)
    hit = np.flatnonzero(f >= level)
    if hit.size:
        j = hit[0]
        if j == 0:
            return lo
        k0, k1, f0, f1 = pts[j - 1], pts[j], f[j - 1], f[j]
        return k0 + (level - f0) * (k1 - k0) / (f1 - f0)
    if np.isfinite(hi):
        return None
    # beyond the last kink the function is linear
    k0 = pts[-1]
    slope = np.sign(h0 + (k0 + 1.0) * h1) @ h1
    if slope > 0:
        return k0 + (level - f[-1]) / slope
    return None


def _kkt_violated(quad, h0, h1, g0, g1, b, e, status, kappa, pinned) -> bool:
    h = h0 + kappa * h1
    g = g0 + kappa * g1
    htol = 1e-10 * max(b.max(), 1e-300)
    gtol = _grad_tol(quad, h0, h1, kappa, e)
    free = status == 0
    return bool(np.any(free & (np.abs(h) > b + htol))
                or np.any((status == 1) & ~pinned & (g > gtol))
                or np.any((status == -1) & ~pinned & (g < -gtol)))


def bounded_qp(quad, e, a, b, investment, max_segments=None) -> Holdings:
    """Budget-normalized solution of the box- and equality-constrained QP.

    Follows the solution path H(kappa) from kappa = 0 upward, one active set
    at a time, and returns the first point where sum |H| reaches the budget
    (the path need not be monotone in sum |H|, so the first crossing is the
    well-defined choice). When the bounds sum exactly to the budget only the
    kappa -> infinity vertex can meet it.
    """
    n = e.shape[0]
    if b.sum() <= investment * (1 + 1e-9):
        return _saturated(e, a, b, investment)
    pinned = b == 0
    status = np.where(pinned, 1, 0)
    kappa = 0.0
    h1_scale = k_cap = None
    max_segments = max_segments or 20 * n + 100
    for _ in range(max_segments):
        sol = _affine_solution(quad, e, a, b, status)
        if sol is None:
            return _saturated(e, a, b, investment)
        h0, h1, g0, g1 = sol
        if h1_scale is None:
            h1_scale = np.abs(h1).max()
            if not h1_scale > 0:
                raise DataError("expected returns have no component outside the constraint span")
            # kappa this far beyond the free-solution scale only arises from round-off
            k_cap = 1e8 * investment / np.abs(h1).sum()
        if kappa > 0 and _kkt_violated(quad, h0, h1, g0, g1, b, e, status, kappa, pinned):
            # degenerate breakpoint: re-solve just past it
            probe = kappa * (1 + 1e-9)
            try:
                status, sol = _solve_at(quad, e, a, b, probe, status)
            except NumericalError:
                return _saturated(e, a, b, investment)
            h0, h1, g0, g1 = sol
        h1 = np.where(np.abs(h1) > 1e-12 * h1_scale, h1, 0.0)

        free = status == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hit = np.where(h1 > 0, (b - h0) / h1, np.where(h1 < 0, (-b - h0) / h1, np.inf))
            t_rel = -g0 / g1
        t_hit[~free] = np.inf
        t_rel[~(((status == 1) & (g1 > 0)) | ((status == -1) & (g1 < 0))) | pinned] = np.inf
        t = np.minimum(t_hit, t_rel)
        t[~(t > kappa)] = np.inf
        k_end = float(t.min())
        if k_end > k_cap:
            k_end = np.inf

        k_star = _first_crossing(h0, h1, kappa, k_end, investment)
        if k_star is not None and k_star <= k_cap:
            h = np.clip(h0 + k_star * h1, -b, b)
            at_bound = np.flatnonzero((status != 0) & ~pinned)
            return Holdings(h, float(k_star), tuple(int(i) for i in at_bound))
        if not np.isfinite(k_end):
            raise InfeasibleError(f"budget {investment:.6g} unreachable within bounds")

        events = t <= k_end * (1 + 1e-12)
        hit = events & free
        status = status.copy()
        status[hit] = np.where(h1[hit] > 0, 1, -1)
        status[events & ~free] = 0
        kappa = k_end
    raise ConvergenceError("bounded optimization: solution path did not terminate")


def _saturated(e, a, b, investment) -> Holdings:
    h = _limit_solution(e, a, b)
    total = np.abs(h).sum()
    if total < investment * (1 - 1e-9):
        raise InfeasibleError(f"budget {investment:.6g} unreachable within bounds "
                              f"(at most {total:.6g})")
    h = np.clip(h * (investment / total), -b, b)
    binding = np.flatnonzero(np.abs(np.abs(h) - b) <= 1e-12 * max(b.max(), 1.0))
    return Holdings(h, np.inf, tuple(int(i) for i in binding))


def optimize_bounded(req: OptimizationRequest) -> Holdings:
    """Holdings under |H_i| <= B_i; identical to optimize_unbounded when no bound binds."""
    if req.bounds is None:
        return optimize_unbounded(req)
    free = optimize_unbounded(req)
    if np.all(np.abs(free.h) <= req.bounds):
        return free
    e = req.expected_returns if req.mean_reversion else -req.expected_returns
    m = req.model
    quad = _DiagPlusLowRank(m.spec_risk**2, m.fac_load, m.fac_cov)
    return bounded_qp(quad, e, np.ones((m.n, 1)), req.bounds, req.investment)


def optimize(req: OptimizationRequest) -> Holdings:
    return optimize_unbounded(req) if req.bounds is None else optimize_bounded(req)


def regression_holdings(expected_returns, loadings, weights, investment: float,
                        with_intercept: bool = False, bounds=None,
                        mean_reversion: bool = True) -> Holdings:
    """Holdings from weighted-regression residuals of E on the loadings.

    Unbounded: H = -omega * eps with eps the residuals (intercept optional),
    then demeaned and scaled to the budget. Bounded: the QP with
    G = diag(1/omega) and neutrality to both u and every loading column, so
    the intercept flag has no effect there.
    """
    e = np.asarray(expected_returns, dtype=float)
    if not mean_reversion:
        e = -e
    n = e.shape[0]
    w = np.asarray(weights, dtype=float)
    load = np.asarray(loadings, dtype=float).reshape(n, -1)
    if w.shape != (n,) or not np.all(w > 0):
        raise DataError("regression weights must be a positive N-vector")
    if not investment > 0:
        raise ConfigError("investment level must be positive")
    design = np.hstack([load, np.ones((n, 1))]) if with_intercept else load
    if design.shape[1] >= n:
        raise DataError(f"regression needs fewer regressors than instruments ({design.shape[1]} >= {n})")

    if bounds is not None:
        b = np.asarray(bounds, dtype=float)
        if b.shape != (n,) or not np.all(b >= 0):
            raise ConfigError("bounds must be a non-negative N-vector")
        if b.sum() < investment * (1 - 1e-12):
            raise InfeasibleError(f"bounds sum to {b.sum():.6g} < investment {investment:.6g}")
        a = np.hstack([np.ones((n, 1)), load])
        _check_rank(a)
        _check_direction(e)
        return bounded_qp(_DiagPlusLowRank(1.0 / w, np.zeros((n, 0)), np.zeros((0, 0))),
                          e, a, b, investment)
    return _regression_unbounded(e, design, w, investment)


def _check_rank(design) -> None:
    if design.shape[1] and np.linalg.matrix_rank(design) < design.shape[1]:
        raise DataError("rank-deficient regression design matrix")


def _regression_unbounded(e, design, w, investment) -> Holdings:
    if design.shape[1]:
        _check_rank(design)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(sw[:, None] * design, sw * e, rcond=None)
        eps = e - design @ coef
    else:
        eps = e
    if not np.abs(eps).max() > 1e-12 * max(np.abs(e).max(), np.finfo(float).tiny):
        raise DataError("zero alpha after factor neutralization")
    raw = w * eps
    raw = raw - raw.mean()
    l1 = np.abs(raw).sum()
    if not l1 > 1e-300:
        raise DataError("zero alpha after factor neutralization")
    eta = investment / l1
    return Holdings(-eta * raw, eta)


def regression_inputs(model: FactorModel):
    """(loadings, weights) for regression_holdings from a covariance-units model."""
    return model.fac_load, 1.0 / model.spec_risk**2
