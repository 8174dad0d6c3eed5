"""Factor-model risk models built from principal components.

Every model has the form

    Gamma = diag(spec_risk**2) + fac_load @ fac_cov @ fac_load.T

and lives either in correlation units (unit diagonal for the conforming
variants) or in covariance units after ``to_covariance``. The inverse is
always taken through the Woodbury identity, so nothing N x N is formed
unless ``cov_mat``/``inv_cov`` are requested.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .eigen import RANK_TOL, EigenSystem, dense_sym_eigen, eigen_no_iter, phi_cholesky
from .errors import ConfigError, DataError, ModelError
from .moments import SampleMoments

CORRELATION = "correlation"
COVARIANCE = "covariance"
# variants that deliberately break Gamma_ii = total variance
NONCONFORMING = frozenset({"full_factors_k_xi", "k_factors_unit_xi"})
# relative specific variance at or below this is treated as non-positive
_XI2_TOL = 1e-12


def woodbury_apply(spec_risk, fac_load, fac_cov, z) -> np.ndarray:
    """Gamma^{-1} z for Gamma = diag(spec_risk^2) + fac_load fac_cov fac_load^T.

    Uses D^-1 - D^-1 W (I + fac_cov W^T D^-1 W)^-1 fac_cov W^T D^-1, which
    needs no inverse of fac_cov and so also covers singular factor
    covariances (e.g. a zero-variance intercept factor).
    """
    d_inv = 1.0 / np.asarray(spec_risk, dtype=float) ** 2
    w = np.asarray(fac_load, dtype=float)
    z = np.asarray(z, dtype=float)
    dz = d_inv * z if z.ndim == 1 else d_inv[:, None] * z
    if w.size == 0:
        return dz
    phi = np.asarray(fac_cov, dtype=float)
    wd = d_inv[:, None] * w
    inner = np.eye(w.shape[1]) + phi @ (w.T @ wd)
    try:
        if np.linalg.cond(inner) > 1e14:
            raise np.linalg.LinAlgError
        corr = np.linalg.solve(inner, phi @ (wd.T @ z))
    except np.linalg.LinAlgError:
        raise ModelError("singular K x K inner matrix in Woodbury inverse") from None
    return dz - wd @ corr


def woodbury_inverse(spec_risk, fac_load, fac_cov) -> np.ndarray:
    """Dense Gamma^{-1} via the Woodbury identity; O(N^2 K) memory and time."""
    n = np.asarray(spec_risk).shape[0]
    inv = woodbury_apply(spec_risk, fac_load, fac_cov, np.eye(n))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class KSelection:
    k: int
    method: str
    excl_first: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FactorModel:
    """Specific risks, loadings and factor covariance of a factor model."""

    spec_risk: np.ndarray
    fac_load: np.ndarray
    fac_cov: np.ndarray
    mode: str = CORRELATION
    variant: str = "pc"
    instruments: tuple = ()
    selection: KSelection | None = None

    def __post_init__(self):
        xi = np.asarray(self.spec_risk, dtype=float)
        w = np.asarray(self.fac_load, dtype=float).reshape(xi.shape[0], -1)
        phi = np.asarray(self.fac_cov, dtype=float).reshape(w.shape[1], w.shape[1])
        if not np.all(xi > 0):
            raise ModelError("specific risks must be positive")
        if self.mode not in (CORRELATION, COVARIANCE):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name, a in (("spec_risk", xi), ("fac_load", w), ("fac_cov", phi)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "instruments", tuple(self.instruments))

    @property
    def n(self) -> int:
        return self.spec_risk.shape[0]

    @property
    def k(self) -> int:
        return self.fac_load.shape[1]

    @property
    def conforming(self) -> bool:
        """True when the model reproduces the in-sample variances."""
        return self.variant not in NONCONFORMING

    @cached_property
    def cov_mat(self) -> np.ndarray:
        g = self.fac_load @ self.fac_cov @ self.fac_load.T
        g = 0.5 * (g + g.T)
        g[np.diag_indices(self.n)] += self.spec_risk**2
        g.setflags(write=False)
        return g

    @cached_property
    def inv_cov(self) -> np.ndarray:
        inv = woodbury_inverse(self.spec_risk, self.fac_load, self.fac_cov)
        inv.setflags(write=False)
        return inv

    def inv_apply(self, z) -> np.ndarray:
        return woodbury_apply(self.spec_risk, self.fac_load, self.fac_cov, z)

    def to_covariance(self, sigma) -> FactorModel:
        """Rescale a correlation-units model by the sample volatilities."""
        if self.mode != CORRELATION:
            raise ModelError("model is already in covariance units")
        sigma = np.asarray(sigma, dtype=float)
        return replace(self, spec_risk=sigma * self.spec_risk,
                       fac_load=sigma[:, None] * self.fac_load, mode=COVARIANCE)


def _check_xi2(xi2, total_variance, instruments=()) -> None:
    bad = np.flatnonzero(~(xi2 > _XI2_TOL * total_variance))
    if bad.size:
        i = bad[0]
        who = instruments[i] if len(instruments) > i else i
        raise ModelError(f"factor risk exceeds total variance for instrument {who!r} "
                         f"(specific variance {xi2[i]:.3g})")


def principal_components(moments: SampleMoments, use_cor: bool = True) -> EigenSystem:
    """The (at most M) nonzero principal components of the correlation or covariance matrix.

    Goes through the iteration-free solver when M <= N, else a dense solve.
    """
    base = moments.y if use_cor else moments.x
    if moments.m <= moments.n:
        return eigen_no_iter(base, use_cor=False)
    full = dense_sym_eigen(moments.cor if use_cor else moments.cov)
    keep = full.values > RANK_TOL * max(1.0, full.values[0])
    return EigenSystem(full.values[keep], full.vectors[:, keep], m=moments.m)


def truncate_pc(eigs: EigenSystem, k: int, total_variance=None, instruments=()) -> FactorModel:
    """K-factor model from the first ``k`` principal components.

    Specific variances make up the diagonal deficit, so Gamma_ii equals the
    total variance (1 in correlation units). ``total_variance`` switches to
    a model of the covariance matrix itself.
    """
    if not 1 <= k <= len(eigs):
        raise ConfigError(f"k={k} outside [1, {len(eigs)}]")
    lam = eigs.values[:k]
    if np.any(lam <= 0):
        raise ModelError("cannot build loadings from non-positive eigenvalues")
    load = eigs.vectors[:, :k] * np.sqrt(lam)
    n = load.shape[0]
    tv = np.ones(n) if total_variance is None else np.asarray(total_variance, dtype=float)
    xi2 = tv - np.einsum("ia,ia->i", load, load)
    _check_xi2(xi2, tv, instruments)
    return FactorModel(np.sqrt(xi2), load, np.eye(k),
                       mode=CORRELATION if total_variance is None else COVARIANCE,
                       instruments=instruments)


def _m_of(eigs: EigenSystem, m) -> int | None:
    return m if m is not None else eigs.m


def fix_k_minimization(eigs: EigenSystem, excl_first: bool = False,
                       total_variance=None, m: int | None = None) -> KSelection:
    """Pick K at the first local minimum of |sqrt(min xi^2) + sqrt(max xi^2) - 1|.

    Scans K upward and stops at the first K where the target grows or where
    some specific variance turns negative; the previous K wins. With
    ``excl_first`` the first component is pinned in the model and the scan
    runs on the remaining total variance from K=2. The full trace is kept in
    ``diagnostics['g_trace']``.
    """
    m = _m_of(eigs, m)
    if m is None:
        m = len(eigs)
    if m < 3:
        raise DataError(f"minimization needs M >= 3, got M={m}")
    lam, vec = eigs.values, eigs.vectors
    n = vec.shape[0]
    tv = np.ones(n) if total_variance is None else np.asarray(total_variance, dtype=float)
    start = 1
    if excl_first:
        if len(eigs) < 2:
            raise DataError("excl_first needs at least two eigenpairs")
        tv = tv - lam[0] * vec[:, 0] ** 2
        start = 2

    factor_diag = np.zeros(n)
    g_prev = math.inf
    chosen = None
    trace = []
    for k in range(start, min(m, len(eigs)) + 1):
        factor_diag = factor_diag + lam[k - 1] * vec[:, k - 1] ** 2
        z = (tv - factor_diag) / tv
        if not np.all(z >= 0) or not np.all(np.isfinite(z)):
            trace.append((k, None))
            break
        g = abs(math.sqrt(z.min()) + math.sqrt(z.max()) - 1.0)
        trace.append((k, g))
        if g > g_prev:
            break
        g_prev = g
        chosen = k
    if chosen is None:
        raise ModelError("no valid K: specific variances non-positive at the first candidate")
    chosen = min(chosen, m - 1)
    return KSelection(chosen, "minimization", excl_first, {"g_trace": trace})


def spectral_entropy(values) -> float:
    """Shannon entropy of the normalized positive eigenvalues."""
    lam = np.asarray(values, dtype=float)
    p = lam / lam.sum()
    return float(-np.sum(p * np.log(p)))


def fix_k_erank(eigs, round_mode: str = "round", excl_first: bool = False,
                m: int | None = None) -> KSelection:
    """K = round (or floor) of the effective rank exp(H) of the spectrum.

    Only eigenvalues above 1e-12 of the largest enter. With ``excl_first``
    the largest is dropped and 1 added back. K is capped at M-1 when M is
    known (from ``m`` or the eigensystem).
    """
    if isinstance(eigs, EigenSystem):
        values, m = eigs.values, _m_of(eigs, m)
    else:
        values = np.asarray(eigs, dtype=float)
    if round_mode not in ("round", "floor"):
        raise ConfigError(f"round_mode must be 'round' or 'floor', got {round_mode!r}")
    values = np.sort(values)[::-1]
    if values.size == 0 or not values[0] > 0:
        raise ModelError("no positive eigenvalues")
    pos = values[values > RANK_TOL * values[0]]
    if excl_first:
        pos = pos[1:]
        if pos.size == 0:
            raise ModelError("excl_first needs at least two positive eigenvalues")
    h = spectral_entropy(pos)
    er = math.exp(h) + (1.0 if excl_first else 0.0)
    # round() is half-to-even, the same as R
    k = math.floor(er) if round_mode == "floor" else round(er)
    k = max(1, int(k))
    if m is not None:
        k = min(k, m - 1)
    return KSelection(k, f"erank_{round_mode}", excl_first, {"entropy": h, "erank": er})


def _resolve_selection(selection, eigs, excl_first, total_variance, m) -> KSelection:
    if isinstance(selection, KSelection):
        return selection
    if isinstance(selection, (int, np.integer)) and not isinstance(selection, bool):
        k = int(selection)
        if not 1 <= k <= m - 1:
            raise ConfigError(f"fixed K={k} outside [1, M-1={m - 1}]")
        return KSelection(k, "fixed", excl_first)
    if selection in ("min", "minimization"):
        return fix_k_minimization(eigs, excl_first, total_variance, m)
    if selection in ("erank", "erank_round"):
        return fix_k_erank(eigs, "round", excl_first, m)
    if selection == "erank_floor":
        return fix_k_erank(eigs, "floor", excl_first, m)
    raise ConfigError(f"unknown K selection {selection!r}")


def build_statistical_model(moments: SampleMoments, selection="min", use_cor: bool = True,
                            excl_first: bool = False) -> FactorModel:
    """Principal-component model with K fixed by ``selection``.

    ``selection`` is "min", "erank", "erank_floor", an integer K, or a
    precomputed KSelection. The result is in covariance units either way:
    with ``use_cor`` the model is built for the correlation matrix and then
    rescaled by the sample volatilities, otherwise directly for C.
    """
    eigs = principal_components(moments, use_cor)
    tv = None if use_cor else moments.sigma**2
    sel = _resolve_selection(selection, eigs, excl_first, tv, moments.m)
    model = truncate_pc(eigs, sel.k, tv, moments.instruments)
    if use_cor:
        model = model.to_covariance(moments.sigma)
    return replace(model, selection=sel)


def _check_q(q) -> None:
    if not 0 < q < 1:
        raise ConfigError(f"shrinkage constant must lie in (0, 1), got {q}")


def build_shrinkage_diag(moments: SampleMoments, q: float) -> FactorModel:
    """(1-q) Psi + q I as an M-factor model: loadings sqrt(lambda) V, factor covariance (1-q) I."""
    _check_q(q)
    eigs = principal_components(moments)
    load = eigs.vectors * np.sqrt(eigs.values)
    return FactorModel(np.full(moments.n, math.sqrt(q)), load, (1 - q) * np.eye(len(eigs)),
                       variant="shrink", instruments=moments.instruments)


def build_shrinkage_uniform(moments: SampleMoments, q: float, rho: float) -> FactorModel:
    """Shrinkage towards the uniform-correlation target (1-rho) I + rho u u^T.

    M principal components scaled by sqrt(1-q) plus an intercept factor of
    variance q*rho; specific variance q(1-rho).
    """
    _check_q(q)
    n = moments.n
    if not abs(rho) < 1 or not rho > -1.0 / (n - 1):
        raise ConfigError(f"rho={rho} makes the uniform-correlation target indefinite "
                          f"(need -1/(N-1) < rho < 1)")
    eigs = principal_components(moments)
    load = np.hstack([eigs.vectors * np.sqrt((1 - q) * eigs.values), np.ones((n, 1))])
    fac_cov = np.diag(np.r_[np.ones(len(eigs)), q * rho])
    return FactorModel(np.full(n, math.sqrt(q * (1 - rho))), load, fac_cov,
                       variant="shrink_uniform", instruments=moments.instruments)


def build_alpha_beta_deformation(moments: SampleMoments, alpha: float, beta: float) -> FactorModel:
    """Replace phi by (alpha I + beta u u^T)/M and fund the diagonal deficit with specific risk.

    The loadings are the first M normalized demeaned return columns and the
    factor covariance is the deformed kernel itself. alpha = beta = 1-q is
    diagonal shrinkage.
    """
    m = moments.m
    if alpha < 0 or alpha + beta * m < 0:
        raise ConfigError(f"deformed kernel must be positive semi-definite "
                          f"(alpha >= 0, alpha + beta*M >= 0), got alpha={alpha}, beta={beta}")
    y = moments.y[:, :m]
    kernel = (alpha * np.eye(m) + beta) / m
    row_sum = y.sum(axis=1)
    xi2 = 1.0 - alpha - (beta - alpha) / m * row_sum**2
    _check_xi2(xi2, np.ones(moments.n), moments.instruments)
    return FactorModel(np.sqrt(xi2), y, kernel, variant="alpha_beta",
                       instruments=moments.instruments)


def build_hybrid_variant(moments: SampleMoments, k: int, variant: str) -> FactorModel:
    """Backtest-only variants that do not reproduce the sample variances.

    * ``full_factors_k_xi``: loadings over all M components, specific
      variances taken from the k-factor truncation (1 <= k <= M-1).
    * ``k_factors_unit_xi``: loadings over the first k components, unit
      specific variance (1 <= k <= M).
    """
    eigs = principal_components(moments)
    m = moments.m
    load = eigs.vectors * np.sqrt(eigs.values)
    if variant == "full_factors_k_xi":
        if not 1 <= k <= min(m - 1, len(eigs)):
            raise ConfigError(f"k={k} outside [1, M-1={m - 1}]")
        xi2 = 1.0 - np.einsum("ia,ia->i", load[:, :k], load[:, :k])
        _check_xi2(xi2, np.ones(moments.n), moments.instruments)
        return FactorModel(np.sqrt(xi2), load, np.eye(len(eigs)), variant=variant,
                           instruments=moments.instruments)
    if variant == "k_factors_unit_xi":
        if not 1 <= k <= m:
            raise ConfigError(f"k={k} outside [1, M={m}]")
        k = min(k, len(eigs))
        return FactorModel(np.ones(moments.n), load[:, :k], np.eye(k), variant=variant,
                           instruments=moments.instruments)
    raise ConfigError(f"unknown hybrid variant {variant!r}")


def deformed_kernel(moments: SampleMoments, k: int) -> np.ndarray:
    """M x M kernel phi~ with Y phi~ Y^T equal to the k-component part of Psi.

    phi~ = c F c^T, c the Cholesky factor of phi and F the projector on the
    top k eigenvectors of the Gram matrix (Y c)^T (Y c).
    """
    m = moments.m
    c = phi_cholesky(m)
    yt = moments.y[:, :m] @ c
    rho, u = np.linalg.eigh(yt.T @ yt)
    u = u[:, ::-1][:, :k]
    return c @ (u @ u.T) @ c.T


def average_correlation(moments: SampleMoments) -> float:
    """Mean of all N^2 entries of the sample correlation matrix."""
    m = moments.m
    # u^T Psi u = s^T phi s with s the column sums of the first M columns of Y
    s = moments.y[:, :m].sum(axis=0)
    return float(s @ (s + s.sum())) / m / moments.n**2


def save_model(model: FactorModel, path) -> None:
    """JSON with full-precision floats (json writes repr, which round-trips)."""
    doc = {
        "instruments": [str(i) for i in model.instruments],
        "mode": model.mode,
        "variant": model.variant,
        "k": model.k,
        "spec_risk": model.spec_risk.tolist(),
        "fac_load": model.fac_load.tolist(),
        "fac_cov": model.fac_cov.tolist(),
    }
    if model.selection is not None:
        doc["selection"] = {"k": model.selection.k, "method": model.selection.method,
                            "excl_first": model.selection.excl_first}
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> FactorModel:
    try:
        doc = json.loads(Path(path).read_text())
        n = len(doc["spec_risk"])
        k = int(doc["k"])
        load = np.array(doc["fac_load"], dtype=float).reshape(n, k)
        return FactorModel(np.array(doc["spec_risk"], dtype=float), load,
                           np.array(doc["fac_cov"], dtype=float).reshape(k, k),
                           mode=doc["mode"], variant=doc.get("variant", "pc"),
                           instruments=tuple(doc.get("instruments", ())))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: not a valid model file ({exc})") from None


@dataclass(frozen=True)
class ModelSpec:
    """A parsed model recipe; ``build_model`` turns it into a covariance-units model."""

    kind: str
    params: tuple = ()
    excl_first: bool = False
    use_cor: bool = True

    def describe(self) -> str:
        text = self.kind
        if self.params:
            text += ":" + ",".join(f"{p:g}" for p in self.params)
        return text


_PC_KINDS = ("min", "erank", "erank_floor", "fixed")
_ARITY = {"min": 0, "erank": 0, "erank_floor": 0, "fixed": 1, "shrink": 1, "shrinkrho": 2,
          "alphabeta": 2, "fullfactors": 1, "unitxi": 1}
_INT_KINDS = ("fixed", "fullfactors", "unitxi")


def parse_method(text: str, excl_first: bool = False, use_cov: bool = False,
                 floor: bool = False) -> ModelSpec:
    """Parse ``min | erank | fixed:K | shrink:q | shrinkrho:q,rho | alphabeta:a,b
    | fullfactors:K | unitxi:K``. ``floor`` switches eRank rounding to floor."""
    kind, _, rest = str(text).strip().partition(":")
    kind = kind.lower()
    if kind == "minimization":
        kind = "min"
    if kind not in _ARITY:
        raise ConfigError(f"unknown model method {text!r}")
    if kind == "erank" and floor:
        kind = "erank_floor"
    try:
        params = tuple(float(p) for p in rest.split(",")) if rest else ()
    except ValueError:
        raise ConfigError(f"model method {text!r}: parameters must be numbers") from None
    if len(params) != _ARITY[kind]:
        raise ConfigError(f"model method {kind!r} takes {_ARITY[kind]} parameter(s), got {len(params)}")
    if kind in _INT_KINDS:
        if params[0] != int(params[0]):
            raise ConfigError(f"model method {kind!r}: K must be an integer")
        params = (int(params[0]),)
    if use_cov and kind not in _PC_KINDS:
        raise ConfigError(f"model method {kind!r} is defined on the correlation matrix only")
    if excl_first and kind not in ("min", "erank", "erank_floor"):
        raise ConfigError("excl_first applies to the minimization and eRank methods only")
    return ModelSpec(kind, params, excl_first, not use_cov)


def build_model(moments: SampleMoments, spec: ModelSpec) -> FactorModel:
    """Covariance-units model for any recipe in ``parse_method``."""
    kind, p = spec.kind, spec.params
    if kind in _PC_KINDS:
        selection = p[0] if kind == "fixed" else kind
        return build_statistical_model(moments, selection, spec.use_cor, spec.excl_first)
    if kind == "shrink":
        model = build_shrinkage_diag(moments, p[0])
    elif kind == "shrinkrho":
        model = build_shrinkage_uniform(moments, p[0], p[1])
    elif kind == "alphabeta":
        model = build_alpha_beta_deformation(moments, p[0], p[1])
    elif kind == "fullfactors":
        model = build_hybrid_variant(moments, p[0], "full_factors_k_xi")
    else:
        model = build_hybrid_variant(moments, p[0], "k_factors_unit_xi")
    return model.to_covariance(moments.sigma)
