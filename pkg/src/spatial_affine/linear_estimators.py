"""Least-squares, spatial GLS and affine estimators for Gaussian outcomes.

Variance parameters are estimated by maximizing the restricted likelihood of
``(Y, Z)`` built from the factorization

    Y | X ~ N(X beta - G^{-1} Q (Z - X_e gamma), G^{-1} + R^{-1})
    Z | X_e ~ N(X_e gamma, (H - Q' G^{-1} Q)^{-1})

with ``R = tau_eps I``. The outcome design is ``X = [z | X_e]`` where
``X_e`` (``Dataset.x_minus_z``) holds the intercept and measured covariates,
so ``beta[0]`` is always the exposure coefficient.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy import optimize, stats

from .graph import AdjacencyGraph, DegeneratePrecisionError
from .joint_gmrf import SpectralJoint, condition_number_log_prior

logger = logging.getLogger(__name__)

ESTIMATOR_TAGS = ("OLS", "GLS", "GLS-RS", "Affine", "Affine-RS")


class DataError(ValueError):
    pass


class RankDeficientError(DataError):
    pass


class DegenerateSEError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed data for one study region.

    ``x_minus_z`` is the design of measured confounders with the intercept in
    its first column. ``offset`` (log expected counts) accompanies count
    outcomes; ``censor_mask`` flags outcomes known only to be below
    ``censor_threshold``.
    """

    y: np.ndarray
    z: np.ndarray
    x_minus_z: np.ndarray
    offset: Optional[np.ndarray] = None
    censor_mask: Optional[np.ndarray] = None
    censor_threshold: Optional[int] = None
    covariate_names: tuple = ()
    ids: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        xe = np.asarray(self.x_minus_z, dtype=float)
        if xe.ndim == 1:
            xe = xe[:, None]
        n = len(y)
        if y.ndim != 1 or z.shape != (n,) or xe.shape[0] != n:
            raise DataError(f"inconsistent lengths: y {y.shape}, z {z.shape}, "
                            f"x_minus_z {xe.shape}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(xe))):
            raise DataError("exposure and covariates must be finite")
        if xe.shape[1] and np.linalg.matrix_rank(xe) < xe.shape[1]:
            raise RankDeficientError("x_minus_z does not have full column rank")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x_minus_z", xe)
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float)
            if off.shape != (n,):
                raise DataError("offset length must equal n")
            object.__setattr__(self, "offset", off)
        if self.censor_mask is not None:
            cm = np.asarray(self.censor_mask, dtype=bool)
            if cm.shape != (n,):
                raise DataError("censor_mask length must equal n")
            if cm.any() and self.censor_threshold is None:
                raise DataError("censored outcomes need a censor_threshold")
            object.__setattr__(self, "censor_mask", cm)
        names = tuple(self.covariate_names)
        if not names:
            names = ("intercept",) + tuple(f"x{k}" for k in range(1, xe.shape[1]))
        if len(names) != xe.shape[1]:
            raise DataError("covariate_names must name every column of x_minus_z")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def design(self) -> np.ndarray:
        """Outcome design ``[z | x_minus_z]``."""
        return np.column_stack([self.z, self.x_minus_z])

    @property
    def beta_names(self) -> tuple:
        return ("z",) + self.covariate_names

    def has_intercept(self) -> bool:
        return self.x_minus_z.shape[1] > 0 and bool(np.all(self.x_minus_z[:, 0] == 1.0))


@dataclass(frozen=True)
class VarianceParams:
    tau_u: float = 1.0
    phi_u: float = 0.0
    tau_z: float = 1.0
    phi_z: float = 0.0
    rho: float = 0.0
    tau_eps: float = 1.0

    def as_tuple(self) -> tuple:
        return (self.tau_u, self.phi_u, self.tau_z, self.phi_z, self.rho, self.tau_eps)

    def as_dict(self) -> dict:
        return dict(zip(("tau_u", "phi_u", "tau_z", "phi_z", "rho", "tau_eps"),
                        self.as_tuple()))


@dataclass
class FitResult:
    beta: np.ndarray
    beta_names: tuple
    gamma: np.ndarray
    variance_params: Optional[VarianceParams]
    se: np.ndarray
    ci: np.ndarray
    level: float
    estimator: str
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)
    log_likelihood: float = float("nan")

    @property
    def beta_z(self) -> float:
        return float(self.beta[0])

    @property
    def se_z(self) -> float:
        return float(self.se[0])

    def summary(self) -> dict:
        out = {
            "estimator": self.estimator,
            "beta": dict(zip(self.beta_names, map(float, self.beta))),
            "se": dict(zip(self.beta_names, map(float, self.se))),
            "ci": {k: [float(lo), float(hi)] for k, (lo, hi) in zip(self.beta_names, self.ci)},
            "level": self.level,
            "gamma": [float(g) for g in self.gamma],
            "converged": bool(self.converged),
            "log_likelihood": float(self.log_likelihood),
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if isinstance(v, (int, float, str, bool, list))},
        }
        if self.variance_params is not None:
            out["variance_params"] = self.variance_params.as_dict()
        return out


def wald_interval(est, se, level=0.95) -> np.ndarray:
    q = stats.norm.ppf(0.5 + level / 2.0)
    est, se = np.asarray(est, dtype=float), np.asarray(se, dtype=float)
    return np.column_stack([est - q * se, est + q * se])


# --------------------------------------------------------------------------
# closed-form estimators

def _check_rank(X):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(f"design of shape {X.shape} is rank deficient")


def gls_estimate(X, y, V) -> tuple[np.ndarray, np.ndarray]:
    """``(X' V^-1 X)^-1 X' V^-1 y`` and its covariance ``(X' V^-1 X)^-1``."""
    X = np.asarray(X, dtype=float)
    cV = scipy.linalg.cho_factor(np.asarray(V, dtype=float), lower=True)
    ViX = scipy.linalg.cho_solve(cV, X)
    F = X.T @ ViX
    cF = scipy.linalg.cho_factor(F, lower=True)
    beta = scipy.linalg.cho_solve(cF, ViX.T @ y)
    return beta, scipy.linalg.cho_solve(cF, np.eye(len(beta)))


def ols_fit(data: Dataset, level: float = 0.95) -> FitResult:
    X = data.design
    _check_rank(X)
    y = data.y
    XtX = X.T @ X
    beta = np.linalg.solve(XtX, X.T @ y)
    resid = y - X @ beta
    dof = max(len(y) - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(XtX)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(beta, data.beta_names, np.zeros(0), None, se,
                     wald_interval(beta, se, level), level, "OLS",
                     diagnostics={"sigma2": sigma2})


# --------------------------------------------------------------------------
# restricted likelihood

class _Infeasible(Exception):
    pass


def _chol(a):
    try:
        return scipy.linalg.cholesky(a, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise _Infeasible


def _logdet_chol(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass
class _RemlTerms:
    log_rl: float
    theta: np.ndarray
    cov: np.ndarray
    G_inv: np.ndarray
    V: np.ndarray
    q: np.ndarray


def _reml_terms(vp: VarianceParams, y, z, X, Xe, graph: AdjacencyGraph,
                extra_cov: Optional[np.ndarray] = None) -> _RemlTerms:
    """Restricted log-likelihood (up to a constant) and GLS coefficients.

    ``extra_cov`` is added to the outcome covariance ``G^-1 + R^-1``; the
    penalized spline uses it for ``psi^-1 L L'``.
    """
    if vp.tau_u <= 0 or vp.tau_z <= 0 or vp.tau_eps <= 0:
        raise _Infeasible
    if abs(vp.phi_u) >= 1 or abs(vp.phi_z) >= 1 or abs(vp.rho) >= 1:
        raise _Infeasible
    n = len(y)
    d = graph.degrees
    W = graph.adjacency.toarray()
    G = vp.tau_u * (np.diag(d) - vp.phi_u * W)
    H = vp.tau_z * (np.diag(d) - vp.phi_z * W)
    q = -vp.rho * np.sqrt(vp.tau_u * vp.tau_z) * d
    LG = _chol(G)
    G_inv = scipy.linalg.cho_solve((LG, True), np.eye(n))
    G_inv = 0.5 * (G_inv + G_inv.T)
    V = G_inv + np.eye(n) / vp.tau_eps
    if extra_cov is not None:
        V = V + extra_cov
    LV = _chol(V)
    GiQ = G_inv * q[None, :]
    Hz = H - q[:, None] * GiQ
    Hz = 0.5 * (Hz + Hz.T)
    LH = _chol(Hz)

    p, k = X.shape[1], Xe.shape[1]
    nu1 = y + GiQ @ z
    C1 = np.hstack([X, GiQ @ Xe]) if k else X
    Vi_C1 = scipy.linalg.cho_solve((LV, True), C1)
    Vi_nu1 = scipy.linalg.cho_solve((LV, True), nu1)
    F = C1.T @ Vi_C1
    g = C1.T @ Vi_nu1
    quad0 = float(nu1 @ Vi_nu1 + z @ Hz @ z)
    if k:
        HXe = Hz @ Xe
        F[p:, p:] += Xe.T @ HXe
        g[p:] += HXe.T @ z
    LF = _chol(F)
    theta = scipy.linalg.cho_solve((LF, True), g)
    quad = quad0 - float(g @ theta)
    log_rl = -0.5 * (_logdet_chol(LV) - _logdet_chol(LH) + _logdet_chol(LF) + quad)
    cov = scipy.linalg.cho_solve((LF, True), np.eye(len(theta)))
    return _RemlTerms(log_rl, theta, cov, G_inv, V, q)


class _RemlEvaluator:
    """Restricted log-likelihood evaluator bound to one data set.

    On regular graphs ``G``, ``H`` and ``Q`` share the eigenvectors of the
    adjacency matrix, so after rotating the data once every evaluation costs
    ``O(n p^2)``. Other graphs, and any extra outcome covariance, use the
    dense path.
    """

    def __init__(self, y, z, X, Xe, graph: AdjacencyGraph):
        self.y, self.z, self.X, self.Xe, self.graph = y, z, X, Xe, graph
        self.fast = graph.is_regular
        if self.fast:
            lam, vec = graph.normalized_spectrum
            self.lam = lam
            self.deg = float(graph.degrees[0])
            self.ry, self.rz = vec.T @ y, vec.T @ z
            self.rX, self.rXe = vec.T @ X, vec.T @ Xe

    def __call__(self, vp: VarianceParams, extra_cov=None) -> float:
        if extra_cov is not None or not self.fast:
            return _reml_terms(vp, self.y, self.z, self.X, self.Xe, self.graph,
                               extra_cov).log_rl
        return self.spectral(vp)[0]

    def spectral(self, vp: VarianceParams):
        if vp.tau_u <= 0 or vp.tau_z <= 0 or vp.tau_eps <= 0:
            raise _Infeasible
        if abs(vp.phi_u) >= 1 or abs(vp.phi_z) >= 1 or abs(vp.rho) >= 1:
            raise _Infeasible
        a = vp.tau_u * self.deg * (1.0 - vp.phi_u * self.lam)
        b = vp.tau_z * self.deg * (1.0 - vp.phi_z * self.lam)
        c = -vp.rho * math.sqrt(vp.tau_u * vp.tau_z) * self.deg
        if np.min(a) <= 0:
            raise _Infeasible
        gq = c / a
        v = 1.0 / a + 1.0 / vp.tau_eps
        hz = b - c * gq
        if np.min(hz) <= 0:
            raise _Infeasible
        p, k = self.X.shape[1], self.Xe.shape[1]
        nu1 = self.ry + gq * self.rz
        C1 = np.hstack([self.rX, gq[:, None] * self.rXe]) if k else self.rX
        w = 1.0 / v
        F = C1.T @ (w[:, None] * C1)
        g = C1.T @ (w * nu1)
        quad0 = float(nu1 @ (w * nu1) + self.rz @ (hz * self.rz))
        if k:
            F[p:, p:] += self.rXe.T @ (hz[:, None] * self.rXe)
            g[p:] += self.rXe.T @ (hz * self.rz)
        LF = _chol(F)
        theta = scipy.linalg.cho_solve((LF, True), g)
        quad = quad0 - float(g @ theta)
        log_rl = -0.5 * (float(np.sum(np.log(v))) - float(np.sum(np.log(hz)))
                         + _logdet_chol(LF) + quad)
        return log_rl, theta


def restricted_log_likelihood(variance_params: VarianceParams, data: Dataset,
                              graph: AdjacencyGraph, exposure_covariates: bool = True,
                              design: Optional[np.ndarray] = None) -> float:
    """Log restricted likelihood of ``(Y, Z)`` at the given variance parameters.

    Returns ``-inf`` when the parameters leave the positive-definite region.
    With ``exposure_covariates=False`` the exposure has mean zero and no
    ``gamma`` is estimated. ``design`` overrides the outcome design
    ``[z | x_minus_z]``.
    """
    X = data.design if design is None else np.asarray(design, dtype=float)
    Xe = data.x_minus_z if exposure_covariates else np.zeros((data.n, 0))
    try:
        return _RemlEvaluator(data.y, data.z, X, Xe, graph)(variance_params)
    except _Infeasible:
        return -math.inf


# --------------------------------------------------------------------------
# parameter transforms for unconstrained optimization

_MAX_LOG_TAU = 12.0


def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def _logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1.0 - p))


@dataclass
class _Param:
    """Maps an unconstrained vector to VarianceParams for one fit."""

    free: tuple
    fixed: dict
    restrict: bool
    spectral: SpectralJoint

    def to_params(self, v) -> VarianceParams:
        vals = dict(self.fixed)
        it = dict(zip(self.free, v))
        for name in ("tau_u", "tau_z", "tau_eps"):
            if name in it:
                vals[name] = math.exp(min(max(it[name], -_MAX_LOG_TAU), _MAX_LOG_TAU))
        if "phi_u" in it:
            vals["phi_u"] = math.tanh(it["phi_u"])
        if "phi_z" in it:
            if self.restrict:
                vals["phi_z"] = min(vals["phi_u"], -1.0 + (1.0 + vals["phi_u"]) * _sigmoid(it["phi_z"]))
            else:
                vals["phi_z"] = math.tanh(it["phi_z"])
        if "rho" in it:
            lim = self.spectral.rho_limit(vals["phi_u"], vals["phi_z"])
            vals["rho"] = lim * math.tanh(it["rho"])
        return VarianceParams(**vals)

    def from_params(self, vp: VarianceParams) -> np.ndarray:
        out = []
        for name in self.free:
            val = getattr(vp, name)
            if name.startswith("tau"):
                out.append(math.log(val))
            elif name == "phi_u":
                out.append(math.atanh(np.clip(val, -0.999, 0.999)))
            elif name == "phi_z":
                if self.restrict:
                    out.append(_logit((val + 1.0) / (1.0 + vp.phi_u)))
                else:
                    out.append(math.atanh(np.clip(val, -0.999, 0.999)))
            elif name == "rho":
                lim = self.spectral.rho_limit(vp.phi_u, vp.phi_z)
                out.append(math.atanh(np.clip(val / lim, -0.999, 0.999)) if lim > 0 else 0.0)
        return np.array(out)


def _initial_params(data: Dataset, graph: AdjacencyGraph, design) -> VarianceParams:
    dbar = float(np.mean(graph.degrees))
    Xe = data.x_minus_z
    zr = data.z - Xe @ np.linalg.lstsq(Xe, data.z, rcond=None)[0] if Xe.shape[1] else data.z
    yr = data.y - design @ np.linalg.lstsq(design, data.y, rcond=None)[0]
    vz = max(float(np.var(zr)), 1e-8)
    vy = max(float(np.var(yr)), 1e-8)
    return VarianceParams(tau_u=2.0 / (vy * dbar), phi_u=0.5, tau_z=1.0 / (vz * dbar),
                          phi_z=0.2, rho=0.0, tau_eps=2.0 / vy)


@dataclass
class _OptResult:
    params: VarianceParams
    objective: float
    converged: bool
    n_starts: int
    start_values: list


def _maximize(objective: Callable[[VarianceParams], float], pmap: _Param,
              start: VarianceParams, n_starts: int, seed: int) -> _OptResult:
    """Multi-start Nelder-Mead maximization of ``objective`` over ``pmap.free``."""
    rng = np.random.default_rng(seed)
    v0 = pmap.from_params(start)

    def neg(v):
        try:
            val = objective(pmap.to_params(v))
        except (_Infeasible, ValueError):
            return 1e300
        return -val if np.isfinite(val) else 1e300

    values, runs = [], []
    for s in range(max(n_starts, 1)):
        x0 = v0 if s == 0 else v0 + rng.normal(scale=0.75, size=len(v0))
        r = optimize.minimize(neg, x0, method="Nelder-Mead",
                              options={"xatol": 1e-4, "fatol": 1e-6,
                                       "maxiter": 400 * len(v0), "adaptive": True})
        values.append(float(-r.fun))
        runs.append(r)
    best = min(runs, key=lambda r: r.fun)
    # polish the best start; restarting the simplex guards against collapse
    x, fun, ok = best.x, best.fun, bool(best.success)
    for _ in range(3):
        r = optimize.minimize(neg, x, method="Nelder-Mead",
                              options={"xatol": 1e-8, "fatol": 1e-11,
                                       "maxiter": 1000 * len(v0), "adaptive": True})
        improved = fun - r.fun
        if r.fun <= fun:
            x, fun = r.x, r.fun
        ok = bool(r.success)
        if improved < 1e-9:
            break
    return _OptResult(pmap.to_params(x), float(-fun), ok and fun < 1e299,
                      n_starts, values)


def _boundary_flags(vp: VarianceParams, spectral: SpectralJoint) -> list:
    flags = []
    for name in ("tau_u", "tau_z", "tau_eps"):
        if abs(math.log(getattr(vp, name))) > _MAX_LOG_TAU - 2:
            flags.append(name)
    for name in ("phi_u", "phi_z"):
        if abs(getattr(vp, name)) > 0.995:
            flags.append(name)
    lim = spectral.rho_limit(vp.phi_u, vp.phi_z)
    if lim > 0 and abs(vp.rho) > 0.995 * lim:
        flags.append("rho")
    return flags


def _fit_variance(data: Dataset, graph: AdjacencyGraph, design, *, fix_rho, restrict,
                  kappa_rate, n_starts, seed, extra_free=(), extra=None):
    """Maximize the (optionally kappa-penalized) restricted likelihood.

    ``extra_free`` names additional positive scalars (optimized on the log
    scale, started at 1) and ``extra(vp, values)`` returns a matrix added to
    the outcome covariance. When ``rho`` is fixed at zero, scales are
    unrestricted and no prior is used, the likelihood separates into outcome
    and exposure factors which are maximized in turn.

    Returns ``(VarianceParams, extra values, converged, diagnostics)``.
    """
    graph.require_no_isolated()
    spectral = SpectralJoint.for_graph(graph)
    start = _initial_params(data, graph, design)
    if fix_rho is not None:
        start = replace(start, rho=float(fix_rho))
    Xe = data.x_minus_z
    n_extra = len(extra_free)
    evaluator = _RemlEvaluator(data.y, data.z, design, Xe, graph)

    def objective(pair):
        vp, ev = pair
        extra_cov = extra(vp, ev) if extra is not None else None
        val = evaluator(vp, extra_cov)
        if kappa_rate is not None:
            kappa = spectral.condition_number(vp.tau_u, vp.phi_u, vp.tau_z, vp.phi_z, vp.rho)
            val += condition_number_log_prior(kappa, kappa_rate)
        return val

    def run(free, fixed, start_vp, seed_):
        pmap = _PairParam(_Param(tuple(free), fixed, restrict, spectral), tuple(extra_free))
        return _maximize(objective, pmap, (start_vp, {k: 1.0 for k in extra_free}),
                         n_starts, seed_)

    diag = {}
    separable = fix_rho == 0.0 and not restrict and kappa_rate is None
    if separable:
        # exposure factor first; it depends on (tau_z, phi_z) only
        zfixed = {k: v for k, v in start.as_dict().items() if k not in ("tau_z", "phi_z")}
        pm_z = _Param(("tau_z", "phi_z"), zfixed, False, spectral)
        # with rho = 0 the outcome covariance does not affect this factor
        rz = _maximize(evaluator, pm_z, start, n_starts, seed)
        vz = rz.params
        yfixed = {"tau_z": vz.tau_z, "phi_z": vz.phi_z, "rho": 0.0}
        ry = run(("tau_u", "phi_u", "tau_eps"), yfixed,
                 replace(start, tau_z=vz.tau_z, phi_z=vz.phi_z), seed + 1)
        (vp, ev), converged, obj = ry.params, rz.converged and ry.converged, ry.objective
        diag["start_values"] = ry.start_values
    else:
        free = ["tau_u", "phi_u", "tau_z", "phi_z", "tau_eps"]
        fixed = {}
        if fix_rho is None:
            free.insert(4, "rho")
        else:
            fixed["rho"] = float(fix_rho)
        r = run(free, fixed, start, seed)
        (vp, ev), converged, obj = r.params, r.converged, r.objective
        diag["start_values"] = r.start_values
    if n_extra:
        diag.update({k: float(v) for k, v in ev.items()})
    flags = _boundary_flags(vp, spectral)
    diag["boundary"] = flags
    diag["objective"] = obj
    if flags:
        warnings.warn(f"restricted likelihood maximum on the boundary for {flags}",
                      RuntimeWarning, stacklevel=3)
    return vp, ev, converged, diag


@dataclass
class _PairParam:
    """Variance parameters plus extra log-scale scalars."""

    base: _Param
    names: tuple

    def to_params(self, v):
        k = len(self.names)
        head = v[:len(v) - k] if k else v
        tail = np.exp(np.clip(v[len(v) - k:], -30.0, 30.0)) if k else []
        return self.base.to_params(head), dict(zip(self.names, map(float, tail)))

    def from_params(self, pair):
        vp, ev = pair
        return np.concatenate([self.base.from_params(vp),
                               [math.log(ev[name]) for name in self.names]])


def _estimator_settings(tag: str):
    if tag not in ESTIMATOR_TAGS:
        raise ValueError(f"unknown estimator {tag!r}; expected one of {ESTIMATOR_TAGS}")
    return {"fix_rho": 0.0 if tag.startswith("GLS") else None,
            "restrict": tag.endswith("-RS")}


def _finish(data, graph, vp, tag, level, converged, diag, se_mode="affine"):
    terms = _reml_terms(vp, data.y, data.z, data.design, data.x_minus_z, graph)
    p = data.design.shape[1]
    beta, gamma = terms.theta[:p], terms.theta[p:]
    if se_mode == "affine":
        cov = _augmented_cov(data, graph, vp, gamma, terms)
        se = np.sqrt(np.maximum(np.diag(cov)[:p], 0.0))
    else:
        se = np.sqrt(np.maximum(np.diag(terms.cov)[:p], 0.0))
    correction = -(terms.G_inv @ (terms.q * (data.z - data.x_minus_z @ gamma)))
    diag = dict(diag)
    diag["bias_correction_norm"] = float(np.linalg.norm(correction))
    return FitResult(beta, data.beta_names, gamma, vp, se, wald_interval(beta, se, level),
                     level, tag, converged, diag, terms.log_rl)


def gls_fit(data: Dataset, graph: AdjacencyGraph, restrict_scales: bool = False,
            level: float = 0.95, n_starts: int = 5, seed: int = 0,
            kappa_rate: Optional[float] = None) -> FitResult:
    """Spatial random-effects (GLS) estimator with ``rho`` fixed at zero.

    ``restrict_scales`` fits the exposure CAR jointly and enforces
    ``phi_z <= phi_u``.
    """
    tag = "GLS-RS" if restrict_scales else "GLS"
    vp, _, conv, diag = _fit_variance(data, graph, data.design, fix_rho=0.0,
                                      restrict=restrict_scales,
                                      kappa_rate=kappa_rate if restrict_scales else None,
                                      n_starts=n_starts, seed=seed)
    return _finish(data, graph, vp, tag, level, conv, diag, se_mode="gls")


def affine_fit_reml(data: Dataset, graph: AdjacencyGraph, restrict_scales: bool = False,
                    prior: Optional[float] = None, level: float = 0.95,
                    n_starts: int = 5, seed: int = 0,
                    fix_rho: Optional[float] = None) -> FitResult:
    """Affine estimator with REML (or MAP, when ``prior`` is a kappa-prior rate).

    ``fix_rho=0`` reproduces :func:`gls_fit`.
    """
    if fix_rho is not None and fix_rho == 0.0:
        fit = gls_fit(data, graph, restrict_scales, level, n_starts, seed,
                      kappa_rate=prior)
        fit.estimator = "Affine-RS" if restrict_scales else "Affine"
        fit.diagnostics["rho_fixed"] = 0.0
        return fit
    tag = "Affine-RS" if restrict_scales else "Affine"
    vp, _, conv, diag = _fit_variance(data, graph, data.design, fix_rho=fix_rho,
                                      restrict=restrict_scales, kappa_rate=prior,
                                      n_starts=n_starts, seed=seed)
    return _finish(data, graph, vp, tag, level, conv, diag)


def reml_fit(data: Dataset, graph: AdjacencyGraph, estimator: str,
             kappa_rate: Optional[float] = 0.1, **kw) -> FitResult:
    """Dispatch on an estimator tag.

    The kappa prior (MAP) is applied to the -RS and affine variants, as in
    the Bayesian study; plain OLS and GLS use the bare restricted likelihood.
    """
    if estimator == "OLS":
        return ols_fit(data, level=kw.get("level", 0.95))
    s = _estimator_settings(estimator)
    use_prior = kappa_rate if estimator != "GLS" else None
    if s["fix_rho"] == 0.0:
        return gls_fit(data, graph, s["restrict"], kappa_rate=use_prior, **kw)
    return affine_fit_reml(data, graph, s["restrict"], prior=use_prior, **kw)


# --------------------------------------------------------------------------
# standard errors

def augmented_design_covariance(X, extra_column, V) -> np.ndarray:
    """``(D' V^-1 D)^-1`` for the design ``D = [X | extra_column]``."""
    Dm = np.column_stack([np.asarray(X, dtype=float), np.asarray(extra_column, dtype=float)])
    if np.linalg.matrix_rank(Dm) < Dm.shape[1]:
        raise DegenerateSEError("augmented design is singular: the rho direction "
                                "lies in the column space of X")
    _, cov = gls_estimate(Dm, np.zeros(len(Dm)), V)
    return cov


def _rho_direction(G_inv, vp: VarianceParams, graph, resid):
    d = graph.degrees
    q_star = -np.sqrt(vp.tau_u * vp.tau_z) * d
    return -(G_inv @ (q_star * resid))


def _augmented_cov(data, graph, vp, gamma, terms):
    resid = data.z - data.x_minus_z @ gamma
    col = _rho_direction(terms.G_inv, vp, graph, resid)
    return augmented_design_covariance(data.design, col, terms.V)


def affine_standard_errors(fit: FitResult, data: Dataset, graph: AdjacencyGraph) -> np.ndarray:
    """Standard errors of ``beta`` treating ``rho`` as an extra coefficient.

    The design is augmented with ``-G^{-1} Q* (z - X_e gamma)`` where ``Q*``
    is diagonal with ``-sqrt(g_ii h_ii)``, and the covariance is
    ``(D' V^-1 D)^-1`` with ``V = G^-1 + R^-1``.
    """
    vp = fit.variance_params
    terms = _reml_terms(vp, data.y, data.z, data.design, data.x_minus_z, graph)
    cov = _augmented_cov(data, graph, vp, fit.gamma, terms)
    p = data.design.shape[1]
    return np.sqrt(np.maximum(np.diag(cov)[:p], 0.0))


def naive_standard_errors(fit: FitResult, data: Dataset, graph: AdjacencyGraph) -> np.ndarray:
    """``sqrt(diag((X' V^-1 X)^-1))`` at the fitted variance parameters."""
    terms = _reml_terms(fit.variance_params, data.y, data.z, data.design,
                        data.x_minus_z, graph)
    _, cov = gls_estimate(data.design, data.y, terms.V)
    return np.sqrt(np.diag(cov))


# --------------------------------------------------------------------------
# penalized radial-basis spline

@dataclass(frozen=True)
class SplineSpec:
    """Radial-basis penalized spline ``sum_a beta_a z^a + sum_k l_k |z - xi_k|^A``.

    ``knots=None`` places ``min(n // 4, 20)`` knots at empirical quantiles of
    the exposure. ``psi`` is the roughness penalty, or ``"estimated"``.
    """

    degree: int = 3
    knots: Optional[tuple] = None
    psi: object = "estimated"

    def __post_init__(self):
        if int(self.degree) < 1:
            raise ValueError("spline degree must be a positive integer")
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=float)
            if k.ndim != 1 or np.any(np.diff(k) <= 0):
                raise ValueError("knots must be strictly increasing")
            object.__setattr__(self, "knots", tuple(float(v) for v in k))
        if self.psi != "estimated" and not (float(self.psi) > 0):
            raise ValueError("psi must be positive or 'estimated'")

    def resolve(self, z) -> "SplineSpec":
        """Copy with knots placed at quantiles of ``z`` if none were given."""
        if self.knots is not None:
            return self
        return replace(self, knots=tuple(default_knots(z)))


def default_knots(z, max_knots: int = 20) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    K = min(len(z) // 4, max_knots)
    if K < 1:
        return np.zeros(0)
    probs = np.arange(1, K + 1) / (K + 1)
    return np.quantile(z, probs)


def spline_design(z, spec: SplineSpec) -> tuple[np.ndarray, np.ndarray]:
    """Polynomial block ``[1, z, ..., z^A]`` and radial block ``|z - xi_k|^A``."""
    z = np.asarray(z, dtype=float)
    spec = spec.resolve(z)
    A = int(spec.degree)
    X_poly = np.vander(z, A + 1, increasing=True)
    knots = np.asarray(spec.knots, dtype=float)
    L = np.abs(z[:, None] - knots[None, :]) ** A
    return X_poly, L


@dataclass
class SemiparametricFit:
    fit: FitResult
    spec: SplineSpec
    theta: np.ndarray
    theta_cov: np.ndarray
    psi: float

    def _basis(self, z):
        X_poly, L = spline_design(z, self.spec)
        return np.hstack([X_poly[:, 1:], L])

    def curve(self, z, center: Optional[float] = None) -> np.ndarray:
        """Fitted ``f(z)``; with ``center``, ``f(z) - f(center)``."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        A = int(self.spec.degree)
        K = len(self.spec.knots)
        coef = self.theta[1:A + 1 + K]
        B = self._basis(z)
        if center is not None:
            B = B - self._basis(np.array([center]))
        return B @ coef

    def curve_se(self, z, center: Optional[float] = None) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        A = int(self.spec.degree)
        K = len(self.spec.knots)
        B = self._basis(z)
        if center is not None:
            B = B - self._basis(np.array([center]))
        C = self.theta_cov[1:A + 1 + K, 1:A + 1 + K]
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", B, C, B), 0.0))


def semiparametric_fit(data: Dataset, graph: AdjacencyGraph, spec: SplineSpec,
                       estimator_tag: str = "Affine-RS", level: float = 0.95,
                       n_starts: int = 3, seed: int = 0,
                       kappa_rate: Optional[float] = None,
                       variance_params: Optional[VarianceParams] = None) -> SemiparametricFit:
    """Penalized-spline exposure-response fit with spatial or affine correction.

    Variance parameters (and ``psi`` when estimated) maximize the restricted
    likelihood with outcome covariance ``psi^-1 L L' + G^-1 + R^-1``. The
    coefficients solve the penalized normal equations
    ``(T' W T + psi A) theta = T' W (Y - B (Z - X_e gamma))`` with
    ``W = (G^-1 + R^-1)^-1``, ``T = [X_poly | L | covariates]`` and ``A``
    selecting the radial coefficients.
    """
    if not data.has_intercept():
        raise DataError("semiparametric fit needs an intercept column in x_minus_z")
    if estimator_tag == "OLS":
        raise ValueError("semiparametric fit supports GLS/Affine variants only")
    spec = spec.resolve(data.z)
    X_poly, L = spline_design(data.z, spec)
    cov_cols = data.x_minus_z[:, 1:]
    K = L.shape[1]
    A_deg = int(spec.degree)
    T = np.hstack([X_poly, L, cov_cols])
    design_fixed = np.hstack([X_poly, cov_cols])
    s = _estimator_settings(estimator_tag)
    estimate_psi = spec.psi == "estimated" and K > 0
    LLt = L @ L.T

    if variance_params is not None:
        vp = variance_params
        psi = float(spec.psi) if not estimate_psi else 1.0
        conv, diag = True, {}
    else:
        if estimate_psi:
            extra = (lambda v, ev: LLt / ev["psi"])
            vp, ev, conv, diag = _fit_variance(
                data, graph, design_fixed, fix_rho=s["fix_rho"], restrict=s["restrict"],
                kappa_rate=kappa_rate, n_starts=n_starts, seed=seed,
                extra_free=("psi",), extra=extra)
            psi = float(ev["psi"])
        else:
            psi = float(spec.psi) if spec.psi != "estimated" else 1.0
            fixed_extra = (LLt / psi) if K else None
            vp, _, conv, diag = _fit_variance(
                data, graph, design_fixed, fix_rho=s["fix_rho"], restrict=s["restrict"],
                kappa_rate=kappa_rate, n_starts=n_starts, seed=seed,
                extra=(lambda v, ev: fixed_extra) if K else None)

    terms = _reml_terms(vp, data.y, data.z, design_fixed, data.x_minus_z, graph,
                        (LLt / psi) if K else None)
    gamma = terms.theta[design_fixed.shape[1]:]
    B_resid = terms.G_inv @ (terms.q * (data.z - data.x_minus_z @ gamma))
    # outcome adjusted by the estimated conditional mean of U
    y_adj = data.y + B_resid
    W_cov = terms.G_inv + np.eye(data.n) / vp.tau_eps
    cW = scipy.linalg.cho_factor(W_cov, lower=True)
    WT = scipy.linalg.cho_solve(cW, T)
    pen = np.zeros(T.shape[1])
    pen[A_deg + 1:A_deg + 1 + K] = psi
    F = T.T @ WT + np.diag(pen)
    theta = np.linalg.solve(F, WT.T @ y_adj)
    theta_cov = np.linalg.inv(F)
    theta_cov = 0.5 * (theta_cov + theta_cov.T)
    se = np.sqrt(np.maximum(np.diag(theta_cov), 0.0))
    names = (("intercept",) + tuple(f"z^{a}" for a in range(1, A_deg + 1))
             + tuple(f"l{k}" for k in range(1, K + 1)) + data.covariate_names[1:])
    tag = estimator_tag
    diag = dict(diag)
    diag["psi"] = psi
    fit = FitResult(theta, names, gamma, vp, se, wald_interval(theta, se, level), level,
                    tag, conv, diag, terms.log_rl)
    return SemiparametricFit(fit, spec, theta, theta_cov, psi)
