"""Gibbs sampler for the Bayesian affine estimator.

One sweep updates, in order: outcome coefficients, exposure coefficients,
the latent confounder field, the dependence parameters, the residual and
spline precisions, and censored counts. The joint density of the latent
field ``u`` and the (possibly log-transformed) exposure ``z`` is the CAR
GMRF with precision ``[[G, Q], [Q, H]]``; the exposure model enters only for
the ``spatial-rs``, ``affine`` and ``affine-rs`` estimators.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sps
from scipy import special

from .graph import AdjacencyGraph
from .joint_gmrf import SpectralJoint, condition_number_log_prior, default_surrogate
from .linear_estimators import Dataset, SplineSpec, VarianceParams, spline_design

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian", "poisson")
ESTIMATORS = ("nonspatial", "spatial", "spatial-rs", "affine", "affine-rs")
VARIANCE_NAMES = ("tau_u", "phi_u", "tau_z", "phi_z", "rho", "tau_eps")


class ConfigError(ValueError):
    pass


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters.

    ``tau_shape``/``tau_rate`` set a gamma prior on ``tau_u``, ``tau_z`` and
    ``tau_eps``; ``None`` means a flat prior on the precision itself. The
    spline penalty always has a proper gamma prior (``psi_shape``,
    ``psi_rate``): the likelihood stays bounded away from zero as the
    penalty grows, so a flat prior there is improper. ``beta_sd=inf`` is a flat
    prior on the mean coefficients. ``use_kappa=None`` applies the
    condition-number prior to the estimators that couple ``u`` and ``z``.
    """

    beta_sd: float = 10.0
    tau_shape: Optional[float] = 5.0
    tau_rate: Optional[float] = 5.0
    kappa_rate: float = 0.1
    surrogate: str = "auto"
    use_kappa: Optional[bool] = None
    psi_shape: float = 0.01
    psi_rate: float = 0.01

    def __post_init__(self):
        if not self.beta_sd > 0:
            raise ConfigError("beta_sd must be positive")
        if (self.tau_shape is None) != (self.tau_rate is None):
            raise ConfigError("tau_shape and tau_rate must both be set or both be None")
        if self.tau_shape is not None and not (self.tau_shape > 0 and self.tau_rate > 0):
            raise ConfigError("gamma hyperparameters must be positive")
        if not self.kappa_rate > 0:
            raise ConfigError("kappa_rate must be positive")
        if not (self.psi_shape > 0 and self.psi_rate > 0):
            raise ConfigError("the spline penalty prior must be a proper gamma")
        if self.surrogate != "auto":
            default_surrogate(self.surrogate)

    @classmethod
    def flat(cls, **kw) -> "PriorConfig":
        """Flat priors on the precisions (the simulation-study setting)."""
        return cls(tau_shape=None, tau_rate=None, **kw)

    def log_tau(self, tau: float) -> float:
        if self.tau_shape is None:
            return 0.0
        return (self.tau_shape - 1.0) * math.log(tau) - self.tau_rate * tau


@dataclass(frozen=True)
class ChainConfig:
    """``iterations`` counts every sweep, burn-in included."""

    iterations: int = 11000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    store_u_every: int = 0

    def __post_init__(self):
        if self.iterations <= self.burn_in or self.burn_in < 0:
            raise ConfigError("iterations must exceed burn_in >= 0")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(frozen=True)
class ModelConfig:
    outcome_family: str = "poisson"
    estimator: str = "affine-rs"
    exposure_transform_for_joint: str = "identity"
    spline: Optional[SplineSpec] = None
    priors: PriorConfig = field(default_factory=PriorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    fixed_variance: Optional[VarianceParams] = None
    sample_prior: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.outcome_family not in FAMILIES:
            raise ConfigError(f"outcome_family must be one of {FAMILIES}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.exposure_transform_for_joint not in ("identity", "log"):
            raise ConfigError("exposure_transform_for_joint must be 'identity' or 'log'")

    @property
    def has_u(self) -> bool:
        return self.estimator != "nonspatial"

    @property
    def joint(self) -> bool:
        return self.estimator in ("spatial-rs", "affine", "affine-rs")

    @property
    def free_rho(self) -> bool:
        return self.estimator in ("affine", "affine-rs")

    @property
    def restrict(self) -> bool:
        return self.estimator.endswith("-rs")

    @property
    def use_kappa(self) -> bool:
        if self.priors.use_kappa is not None:
            return self.priors.use_kappa and self.joint
        return self.joint

    def to_dict(self) -> dict:
        out = {
            "outcome_family": self.outcome_family,
            "estimator": self.estimator,
            "exposure_transform_for_joint": self.exposure_transform_for_joint,
            "spline": None if self.spline is None else {
                "degree": self.spline.degree,
                "knots": None if self.spline.knots is None else list(self.spline.knots),
                "psi": self.spline.psi},
            "priors": asdict(self.priors),
            "chain": asdict(self.chain),
            "fixed_variance": None if self.fixed_variance is None
            else self.fixed_variance.as_dict(),
            "sample_prior": self.sample_prior,
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if d.get("spline") is not None:
            sp = d["spline"]
            knots = sp.get("knots")
            d["spline"] = SplineSpec(sp.get("degree", 3), None if knots is None else tuple(knots),
                                     sp.get("psi", "estimated"))
        if "priors" in d:
            d["priors"] = PriorConfig(**d["priors"])
        if "chain" in d:
            d["chain"] = ChainConfig(**d["chain"])
        if d.get("fixed_variance") is not None:
            d["fixed_variance"] = VarianceParams(**d["fixed_variance"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# chain state

@dataclass
class _Context:
    """Quantities fixed for the whole chain."""

    config: ModelConfig
    n: int
    X: np.ndarray
    beta_names: tuple
    penalized: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    censored: np.ndarray
    threshold: Optional[int]
    zj: np.ndarray
    Xe: np.ndarray
    W: Optional[sps.csr_matrix]
    deg: Optional[np.ndarray]
    colours: list
    spectral: Optional[SpectralJoint]
    surrogate: Optional[SpectralJoint]
    dense_u: bool
    colour_rows: list = None
    lam: Optional[np.ndarray] = None
    sum_log_deg: float = 0.0
    sur_lam: Optional[np.ndarray] = None
    sur_deg: float = 0.0
    gauss_cache: dict = None
    XeDXe: np.ndarray = None
    XeWXe: np.ndarray = None
    XeDz: np.ndarray = None
    XeWz: np.ndarray = None
    spline_spec: Optional[SplineSpec] = None

    @property
    def priors(self) -> PriorConfig:
        return self.config.priors


@dataclass
class ChainState:
    """Mutable state of one chain; owned by a single sampler."""

    ctx: _Context
    rng: np.random.Generator
    beta: np.ndarray
    gamma: np.ndarray
    u: np.ndarray
    params: dict
    psi: float
    y: np.ndarray
    iteration: int = 0
    adapting: bool = True
    scales: dict = field(default_factory=dict)
    accept: dict = field(default_factory=dict)
    tries: dict = field(default_factory=dict)
    u_scale: Optional[np.ndarray] = None

    def record(self, block: str, accepted, n_tries=1):
        self.accept[block] = self.accept.get(block, 0) + float(accepted)
        self.tries[block] = self.tries.get(block, 0) + n_tries

    def variance_params(self) -> VarianceParams:
        return VarianceParams(**{k: self.params[k] for k in VARIANCE_NAMES})

    def exposure_residual(self) -> np.ndarray:
        return self.ctx.zj - self.ctx.Xe @ self.gamma


def _outcome_design(data: Dataset, config: ModelConfig):
    if config.spline is None:
        X = data.design
        return X, data.beta_names, np.zeros(X.shape[1], dtype=bool), None
    if not data.has_intercept():
        raise ConfigError("spline models need an intercept column in x_minus_z")
    spec = config.spline.resolve(data.z)
    X_poly, L = spline_design(data.z, spec)
    cov = data.x_minus_z[:, 1:]
    X = np.hstack([X_poly, L, cov])
    A, K = spec.degree, L.shape[1]
    names = (("intercept",) + tuple(f"z^{a}" for a in range(1, A + 1))
             + tuple(f"l{k}" for k in range(1, K + 1)) + data.covariate_names[1:])
    pen = np.zeros(X.shape[1], dtype=bool)
    pen[A + 1:A + 1 + K] = True
    return X, names, pen, spec


def _build_context(config: ModelConfig, data: Dataset, graph: Optional[AdjacencyGraph]) -> _Context:
    n = data.n
    if config.has_u:
        if graph is None:
            raise ConfigError(f"estimator {config.estimator!r} needs a graph")
        if graph.n != n:
            raise ConfigError(f"graph has {graph.n} nodes, data has {n} rows")
        graph.require_no_isolated()
    if config.outcome_family == "poisson":
        if data.offset is None:
            raise ConfigError("poisson outcomes need an offset (use zeros for none)")
        y = data.y
        if np.any(~np.isfinite(y[~_mask(data)])) or np.any(y[~_mask(data)] < 0):
            raise ConfigError("poisson outcomes must be nonnegative counts")
    offset = np.zeros(n) if data.offset is None else data.offset
    censored = _mask(data)
    if censored.any() and config.outcome_family != "poisson":
        raise ConfigError("censoring is only supported for poisson outcomes")
    zj = data.z
    if config.exposure_transform_for_joint == "log":
        if np.any(data.z <= 0):
            raise ConfigError("log exposure transform needs positive exposures")
        zj = np.log(data.z)
    X, names, pen, spec = _outcome_design(data, config)
    Xe = data.x_minus_z
    W = deg = None
    colours = []
    spectral = surrogate = None
    if config.has_u:
        W = graph.adjacency
        deg = np.asarray(graph.degrees)
        colours = graph.coloring
        if config.fixed_variance is None:
            spectral = SpectralJoint.for_graph(graph)
    if config.use_kappa:
        kind = config.priors.surrogate
        if kind == "auto":
            # 2-regular data graphs are rings or lines; anything else is areal
            kind = "ring" if graph.is_regular and graph.degrees[0] == 2 else "grid"
        surrogate = SpectralJoint.for_graph(default_surrogate(kind))
    ctx = _Context(config, n, X, names, pen, np.array(data.y, dtype=float), offset, censored,
                   data.censor_threshold, zj, Xe, W, deg, colours, spectral, surrogate,
                   dense_u=n <= 512, spline_spec=spec)
    ctx.gauss_cache = {}
    if config.has_u:
        ctx.colour_rows = [(idx, W[idx], deg[idx]) for idx in colours]
    if spectral is not None:
        ctx.lam = np.asarray(spectral.lam)
        ctx.sum_log_deg = spectral.sum_log_deg
    if surrogate is not None and surrogate.degree is not None:
        ctx.sur_lam = tuple(float(v) for v in np.unique(np.round(surrogate.lam, 12)))
        ctx.sur_deg = surrogate.degree
    if config.joint:
        D = deg[:, None]
        ctx.XeDXe = Xe.T @ (D * Xe)
        ctx.XeWXe = Xe.T @ (W @ Xe)
        ctx.XeDz = Xe.T @ (deg * zj)
        ctx.XeWz = Xe.T @ (W @ zj)
    return ctx


def _mask(data: Dataset) -> np.ndarray:
    if data.censor_mask is None:
        return np.zeros(data.n, dtype=bool)
    return data.censor_mask


def _initial_state(ctx: _Context, rng) -> ChainState:
    cfg = ctx.config
    y = ctx.y.copy()
    if ctx.censored.any():
        y[ctx.censored] = (ctx.threshold - 1) / 2.0
    if cfg.outcome_family == "poisson":
        target = np.log(y + 0.5) - ctx.offset
    else:
        target = y
    beta = np.linalg.lstsq(ctx.X, target, rcond=None)[0]
    gamma = np.linalg.lstsq(ctx.Xe, ctx.zj, rcond=None)[0] if cfg.joint else np.zeros(0)
    if cfg.fixed_variance is not None:
        params = cfg.fixed_variance.as_dict()
    else:
        params = dict(tau_u=1.0, phi_u=0.1, tau_z=1.0, phi_z=0.05, rho=0.0, tau_eps=1.0)
        if cfg.outcome_family == "gaussian":
            resid = y - ctx.X @ beta
            params["tau_eps"] = 2.0 / max(float(np.var(resid)), 1e-8)
    if cfg.outcome_family == "poisson":
        params["tau_eps"] = math.inf
    if cfg.joint and cfg.fixed_variance is None:
        resid = ctx.zj - ctx.Xe @ gamma
        params["tau_z"] = 1.0 / max(float(np.var(resid) * np.mean(ctx.deg)), 1e-8)
    st = ChainState(ctx, rng, beta, gamma, np.zeros(ctx.n), params, 1.0, y)
    if cfg.outcome_family == "poisson":
        # IWLS proposals need a start inside the bulk of the conditional
        prior = _prior_precision_diag(st)
        for _ in range(25):
            new, _, _ = _iwls_moments(st, st.beta, ctx.offset, prior)
            done = np.max(np.abs(new - st.beta)) < 1e-8
            st.beta = new
            if done:
                break
    st.scales = {k: 0.3 for k in ("tau_u", "phi_u", "tau_z", "phi_z", "rho")}
    st.u_scale = np.full(ctx.n, 0.5)
    return st


# --------------------------------------------------------------------------
# variance block

_TRANSFORM = {"tau_u": "log", "tau_z": "log", "phi_u": "atanh", "phi_z": "atanh", "rho": "atanh"}


def _free_variance_names(cfg: ModelConfig) -> tuple:
    if not cfg.has_u or cfg.fixed_variance is not None:
        return ()
    if not cfg.joint:
        return ("tau_u", "phi_u")
    if not cfg.free_rho:
        return ("tau_u", "phi_u", "tau_z", "phi_z")
    return ("tau_u", "phi_u", "tau_z", "phi_z", "rho")


@dataclass
class _Stats:
    uDu: float
    uWu: float
    uDr: float
    rDr: float
    rWr: float


def _sufficient_stats(state: ChainState) -> _Stats:
    ctx = state.ctx
    u, d = state.u, ctx.deg
    Wu = ctx.W @ u
    if ctx.config.joint:
        r = state.exposure_residual()
        Wr = ctx.W @ r
        return _Stats(float(d @ (u * u)), float(u @ Wu), float(d @ (u * r)),
                      float(d @ (r * r)), float(r @ Wr))
    return _Stats(float(d @ (u * u)), float(u @ Wu), 0.0, 0.0, 0.0)


def _surrogate_kappa(ctx: _Context, p: dict) -> float:
    if ctx.sur_lam is None:
        # irregular surrogate: dense eigenvalues of the small joint precision
        return ctx.surrogate.condition_number(p["tau_u"], p["phi_u"], p["tau_z"],
                                              p["phi_z"], p["rho"])
    tu, tz = p["tau_u"], p["tau_z"]
    c2 = 4.0 * p["rho"] ** 2 * tu * tz
    lo, hi = math.inf, 0.0
    for lam in ctx.sur_lam:
        ga = tu * (1.0 - p["phi_u"] * lam)
        hb = tz * (1.0 - p["phi_z"] * lam)
        disc = math.sqrt((ga - hb) ** 2 + c2)
        lo = min(lo, ga + hb - disc)
        hi = max(hi, ga + hb + disc)
    if lo <= 0:
        return math.inf
    return hi / lo


def log_variance_target(p: dict, stats: Optional[_Stats], ctx: _Context,
                        include_likelihood: bool = True) -> float:
    """Log full conditional of the dependence parameters, up to a constant.

    ``-inf`` outside the support: non-PD joint precision, ``|phi| >= 1`` or a
    violated scale restriction.
    """
    cfg = ctx.config
    if abs(p["phi_u"]) >= 1 or p["tau_u"] <= 0:
        return -math.inf
    val = ctx.priors.log_tau(p["tau_u"])
    n = ctx.n
    if cfg.joint:
        if abs(p["phi_z"]) >= 1 or abs(p["rho"]) >= 1 or p["tau_z"] <= 0:
            return -math.inf
        if cfg.restrict and p["phi_z"] > p["phi_u"]:
            return -math.inf
        val += ctx.priors.log_tau(p["tau_z"])
        lam = ctx.lam
        m = (1.0 - p["phi_u"] * lam) * (1.0 - p["phi_z"] * lam) - p["rho"] ** 2
        if m.min() <= 0:
            return -math.inf
        if include_likelihood:
            ld = (2.0 * ctx.sum_log_deg + n * (math.log(p["tau_u"]) + math.log(p["tau_z"]))
                  + float(np.log(m).sum()))
            q = -p["rho"] * math.sqrt(p["tau_u"] * p["tau_z"])
            quad = (p["tau_u"] * (stats.uDu - p["phi_u"] * stats.uWu)
                    + 2.0 * q * stats.uDr
                    + p["tau_z"] * (stats.rDr - p["phi_z"] * stats.rWr))
            val += 0.5 * ld - 0.5 * quad
        if cfg.use_kappa:
            val += condition_number_log_prior(_surrogate_kappa(ctx, p), ctx.priors.kappa_rate)
    elif include_likelihood:
        ld = (ctx.sum_log_deg + n * math.log(p["tau_u"])
              + float(np.log1p(-p["phi_u"] * ctx.lam).sum()))
        val += 0.5 * ld - 0.5 * p["tau_u"] * (stats.uDu - p["phi_u"] * stats.uWu)
    return val


def _log_jacobian(name, value):
    if _TRANSFORM[name] == "log":
        return math.log(value)
    return math.log1p(-value * value)


def _forward(name, value):
    return math.log(value) if _TRANSFORM[name] == "log" else math.atanh(value)


def _backward(name, s):
    return math.exp(s) if _TRANSFORM[name] == "log" else math.tanh(s)


def update_variance_block(state: ChainState, include_likelihood: bool = True) -> dict:
    """Componentwise random-walk MH over the dependence parameters.

    Proposals move one parameter at a time on a log (precisions) or atanh
    (``phi``, ``rho``) scale; any proposal outside the support is rejected.
    Returns the per-parameter acceptance indicators of this sweep.
    """
    ctx = state.ctx
    names = _free_variance_names(ctx.config)
    if not names:
        return {}
    stats = _sufficient_stats(state) if include_likelihood else None
    cur = dict(state.params)
    cur_lp = log_variance_target(cur, stats, ctx, include_likelihood)
    if not np.isfinite(cur_lp):
        raise SamplerError(f"current dependence parameters left the support: {cur}")
    out = {}
    for name in names:
        s_old = _forward(name, cur[name])
        s_new = s_old + state.scales[name] * state.rng.standard_normal()
        try:
            val = _backward(name, s_new)
        except OverflowError:
            val = math.inf
        prop = dict(cur)
        prop[name] = val
        lp = -math.inf
        if np.isfinite(val) and (_TRANSFORM[name] == "log" and val > 0
                                 or _TRANSFORM[name] == "atanh" and abs(val) < 1):
            lp = log_variance_target(prop, stats, ctx, include_likelihood)
        log_ratio = lp - cur_lp
        if np.isfinite(lp):
            log_ratio += _log_jacobian(name, val) - _log_jacobian(name, cur[name])
        ok = np.isfinite(lp) and math.log(state.rng.random()) < log_ratio
        if ok:
            cur, cur_lp = prop, lp
        out[name] = bool(ok)
        state.record(name, ok)
        if state.adapting:
            # Robbins-Monro step toward 44% acceptance
            step = 1.0 / math.sqrt(state.iteration + 10.0)
            state.scales[name] *= math.exp(step * ((1.0 if ok else 0.0) - 0.44))
    state.params.update(cur)
    return out


# --------------------------------------------------------------------------
# other blocks

def _prior_precision_diag(state: ChainState) -> np.ndarray:
    ctx = state.ctx
    prec = np.full(ctx.X.shape[1], 1.0 / ctx.priors.beta_sd ** 2)
    prec[ctx.penalized] = state.psi
    return prec


def _u_coupling(state: ChainState) -> float:
    """``rho sqrt(tau_z / tau_u)``: slope of the latent mean on the exposure residual."""
    p = state.params
    if not state.ctx.config.joint:
        return 0.0
    return p["rho"] * math.sqrt(p["tau_z"] / p["tau_u"])


def _update_beta_gaussian(state: ChainState):
    ctx = state.ctx
    X = ctx.X
    te = state.params["tau_eps"]
    prec = te * (X.T @ X) + np.diag(_prior_precision_diag(state))
    b = te * (X.T @ (state.y - ctx.offset - state.u))
    state.beta = _draw_normal_canonical(prec, b, state.rng)


def _draw_normal_canonical(prec, lin, rng):
    """Draw from ``N(prec^-1 lin, prec^-1)``."""
    c = scipy.linalg.cho_factor(prec, lower=True, check_finite=False)
    mean = scipy.linalg.cho_solve(c, lin, check_finite=False)
    z = rng.standard_normal(len(mean))
    return mean + scipy.linalg.solve_triangular(c[0], z, lower=True, trans="T",
                                                check_finite=False)


def _collapsed_gaussian_terms(state: ChainState):
    """Canonical form of ``(beta, gamma) | y, z`` with the latent field integrated out."""
    ctx = state.ctx
    p = state.params
    cfg = ctx.config
    key = tuple(p[k] for k in VARIANCE_NAMES) + (state.psi,)
    hit = ctx.gauss_cache.get(key)
    if hit is not None:
        return hit
    n = ctx.n
    G = p["tau_u"] * (np.diag(ctx.deg) - p["phi_u"] * ctx.W.toarray())
    Gc = scipy.linalg.cho_factor(G, lower=True)
    G_inv = scipy.linalg.cho_solve(Gc, np.eye(n))
    V = G_inv + np.eye(n) / p["tau_eps"]
    Vc = scipy.linalg.cho_factor(V, lower=True)
    resp = ctx.y - ctx.offset
    if cfg.joint:
        q = -p["rho"] * math.sqrt(p["tau_u"] * p["tau_z"]) * ctx.deg
        GQ = G_inv * q[None, :]
        C1 = np.hstack([ctx.X, GQ @ ctx.Xe])
        nu1 = resp + GQ @ ctx.zj
        H = p["tau_z"] * (np.diag(ctx.deg) - p["phi_z"] * ctx.W.toarray())
        Hz = H - q[:, None] * GQ
        Vi_C1 = scipy.linalg.cho_solve(Vc, C1)
        k = ctx.Xe.shape[1]
        F = C1.T @ Vi_C1
        F[-k:, -k:] += ctx.Xe.T @ Hz @ ctx.Xe
        lin = Vi_C1.T @ nu1
        lin[-k:] += ctx.Xe.T @ (Hz @ ctx.zj)
        prior = np.concatenate([_prior_precision_diag(state),
                                np.full(k, 1.0 / ctx.priors.beta_sd ** 2)])
    else:
        Vi_X = scipy.linalg.cho_solve(Vc, ctx.X)
        F = ctx.X.T @ Vi_X
        lin = Vi_X.T @ resp
        prior = _prior_precision_diag(state)
    F = F + np.diag(prior)
    if len(ctx.gauss_cache) > 4:
        ctx.gauss_cache.clear()
    ctx.gauss_cache[key] = (F, lin)
    return F, lin


def _update_mean_collapsed(state: ChainState):
    """Joint conjugate draw of ``(beta, gamma)`` with the latent field integrated out."""
    F, lin = _collapsed_gaussian_terms(state)
    theta = _draw_normal_canonical(F, lin, state.rng)
    p = len(state.beta)
    state.beta = theta[:p]
    if state.ctx.config.joint:
        state.gamma = theta[p:]


def _iwls_moments(state, beta, base, prior_prec):
    """Mean and Cholesky factor of the one-step IWLS Gaussian approximation at ``beta``."""
    X = state.ctx.X
    eta = base + X @ beta
    mu = np.exp(eta)
    work = X @ beta + (state.y - mu) / mu
    prec = X.T @ (mu[:, None] * X) + np.diag(prior_prec)
    c = scipy.linalg.cho_factor(prec, lower=True, check_finite=False)
    mean = scipy.linalg.cho_solve(c, X.T @ (mu * work), check_finite=False)
    return mean, np.tril(c[0]), float(state.y @ eta - mu.sum())


def _log_q(x, mean, L):
    """Log Gaussian density (up to a constant) with precision ``L L'``."""
    r = L.T @ (x - mean)
    return float(np.log(np.diag(L)).sum() - 0.5 * r @ r)


def _update_beta_poisson(state: ChainState):
    """MH block update with an IWLS Gaussian proposal."""
    ctx = state.ctx
    base = ctx.offset + state.u
    prior_prec = _prior_precision_diag(state)
    b0 = state.beta
    m0, L0, ll0 = _iwls_moments(state, b0, base, prior_prec)
    z = state.rng.standard_normal(len(b0))
    b1 = m0 + scipy.linalg.solve_triangular(L0, z, lower=True, trans="T", check_finite=False)
    try:
        m1, L1, ll1 = _iwls_moments(state, b1, base, prior_prec)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        state.record("beta", False)
        return
    if not np.isfinite(ll1):
        state.record("beta", False)
        return
    lp0 = ll0 - 0.5 * float(prior_prec @ (b0 ** 2))
    lp1 = ll1 - 0.5 * float(prior_prec @ (b1 ** 2))
    log_r = lp1 - lp0 + _log_q(b0, m1, L1) - _log_q(b1, m0, L0)
    ok = math.log(state.rng.random()) < log_r
    if ok:
        state.beta = b1
    state.record("beta", ok)


def _update_gamma(state: ChainState):
    """Conjugate draw of the exposure coefficients given the latent field."""
    ctx = state.ctx
    p = state.params
    H_part = p["tau_z"] * (ctx.XeDXe - p["phi_z"] * ctx.XeWXe)
    prec = H_part + np.eye(len(state.gamma)) / ctx.priors.beta_sd ** 2
    q = -p["rho"] * math.sqrt(p["tau_u"] * p["tau_z"])
    lin = p["tau_z"] * (ctx.XeDz - p["phi_z"] * ctx.XeWz) + q * (ctx.Xe.T @ (ctx.deg * state.u))
    state.gamma = _draw_normal_canonical(prec, lin, state.rng)


def _latent_prior_terms(state: ChainState):
    """Per-site prior precision and the exposure-driven part of the conditional mean."""
    ctx = state.ctx
    prec = state.params["tau_u"] * ctx.deg
    shift = _u_coupling(state) * state.exposure_residual() if ctx.config.joint else 0.0
    return prec, shift


def _update_u_gaussian(state: ChainState):
    ctx = state.ctx
    p = state.params
    te = p["tau_eps"]
    resid = state.y - ctx.offset - ctx.X @ state.beta
    prec_site, shift = _latent_prior_terms(state)
    if ctx.dense_u:
        G = p["tau_u"] * (np.diag(ctx.deg) - p["phi_u"] * ctx.W.toarray())
        A = G + te * np.eye(ctx.n)
        # G m0 = -Q r with m0 = shift on the diagonal scaling
        b = prec_site * shift + te * resid
        c = scipy.linalg.cho_factor(A, lower=True)
        mean = scipy.linalg.cho_solve(c, b)
        z = state.rng.standard_normal(ctx.n)
        state.u = mean + scipy.linalg.solve_triangular(c[0], z, lower=True, trans="T",
                                                check_finite=False)
        return
    u = state.u
    for idx, Wc, dc in ctx.colour_rows:
        nb = (Wc @ u) / dc
        m0 = p["phi_u"] * nb + (shift[idx] if np.ndim(shift) else 0.0)
        pr = prec_site[idx] + te
        mean = (prec_site[idx] * m0 + te * resid[idx]) / pr
        u[idx] = mean + state.rng.standard_normal(len(idx)) / np.sqrt(pr)


def _update_u_poisson(state: ChainState):
    """Single-site random-walk MH, vectorized over each colour class."""
    ctx = state.ctx
    p = state.params
    lin = ctx.offset + ctx.X @ state.beta
    prec_site, shift = _latent_prior_terms(state)
    u = state.u
    y = state.y
    rng = state.rng
    total = 0.0
    for idx, Wc, dc in ctx.colour_rows:
        nb = (Wc @ u) / dc
        m0 = p["phi_u"] * nb + (shift[idx] if np.ndim(shift) else 0.0)
        old = u[idx]
        new = old + state.u_scale[idx] * rng.standard_normal(len(idx))
        el = np.exp(lin[idx])
        ps = prec_site[idx]
        log_r = (y[idx] * (new - old) - el * (np.exp(new) - np.exp(old))
                 - 0.5 * ps * ((new - m0) ** 2 - (old - m0) ** 2))
        ok = np.log(rng.random(len(idx))) < log_r
        u[idx] = np.where(ok, new, old)
        total += int(ok.sum())
        if state.adapting:
            step = 1.0 / math.sqrt(state.iteration + 10.0)
            state.u_scale[idx] *= np.exp(step * (ok - 0.44))
    state.record("u", total, ctx.n)


def _update_tau_eps(state: ChainState):
    ctx = state.ctx
    resid = state.y - ctx.offset - ctx.X @ state.beta - state.u
    shape = ctx.n / 2.0
    rate = 0.5 * float(resid @ resid)
    pr = ctx.priors
    if pr.tau_shape is None:
        shape += 1.0
    else:
        shape += pr.tau_shape
        rate += pr.tau_rate
    state.params["tau_eps"] = state.rng.gamma(shape, 1.0 / rate)


def _update_psi(state: ChainState):
    ctx = state.ctx
    l = state.beta[ctx.penalized]
    pr = ctx.priors
    shape = len(l) / 2.0 + pr.psi_shape
    rate = 0.5 * float(l @ l) + pr.psi_rate
    state.psi = state.rng.gamma(shape, 1.0 / rate)


def truncated_poisson_pmf(mu: np.ndarray, threshold: int) -> np.ndarray:
    """Rows: Poisson(mu_i) pmf restricted to ``{0, ..., threshold - 1}`` and renormalized."""
    k = np.arange(threshold)
    logp = k[None, :] * np.log(np.maximum(mu, 1e-300))[:, None] - special.gammaln(k + 1)[None, :]
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def impute_censored(state: ChainState, censor_threshold: Optional[int] = None) -> np.ndarray:
    """Redraw censored counts from the Poisson truncated below the threshold."""
    ctx = state.ctx
    idx = np.flatnonzero(ctx.censored)
    if len(idx) == 0:
        return state.y
    c = ctx.threshold if censor_threshold is None else censor_threshold
    eta = ctx.offset[idx] + ctx.X[idx] @ state.beta + state.u[idx]
    mu = np.exp(eta)
    pmf = truncated_poisson_pmf(mu, c)
    bad = ~np.all(np.isfinite(pmf), axis=1)
    if bad.any():
        warnings.warn(f"truncated Poisson mass underflow at {bad.sum()} site(s); "
                      "using the truncated mode", RuntimeWarning)
        mode = np.minimum(np.floor(mu[bad]), c - 1)
        pmf[bad] = 0.0
        pmf[bad, mode.astype(int)] = 1.0
    cdf = np.cumsum(pmf, axis=1)
    draws = (state.rng.random(len(idx))[:, None] > cdf).sum(axis=1)
    state.y[idx] = np.minimum(draws, c - 1)
    return state.y


# --------------------------------------------------------------------------
# driver

@dataclass
class PosteriorSamples:
    beta: np.ndarray
    beta_names: tuple
    gamma: np.ndarray
    variance: dict
    psi: Optional[np.ndarray]
    u_mean: np.ndarray
    u_sd: np.ndarray
    u_draws: Optional[np.ndarray]
    imputed: Optional[np.ndarray]
    acceptance: dict
    config: ModelConfig
    runtime: float
    warnings: list = field(default_factory=list)
    spline_spec: Optional[SplineSpec] = None

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def column(self, name: str) -> np.ndarray:
        if name in self.beta_names:
            return self.beta[:, self.beta_names.index(name)]
        if name in self.variance:
            return self.variance[name]
        raise KeyError(name)

    @property
    def beta_z(self) -> np.ndarray:
        if self.spline_spec is not None:
            raise KeyError("spline fits have no single exposure coefficient")
        return self.column("z")

    def interval(self, name: str = "z", level: float = 0.95) -> tuple[float, float]:
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.column(name), [a, 1.0 - a])
        return float(lo), float(hi)

    def curve_draws(self, grid, center: Optional[float] = 0.0) -> np.ndarray:
        """Draws of the exposure-response curve on ``grid`` (rows are draws)."""
        if self.spline_spec is None:
            raise ValueError("curve summaries need a spline model")
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        spec = self.spline_spec
        A, K = spec.degree, len(spec.knots)

        def basis(z):
            X_poly, L = spline_design(z, spec)
            return np.hstack([X_poly[:, 1:], L])

        B = basis(grid)
        if center is not None:
            B = B - basis(np.array([center]))
        return self.beta[:, 1:A + 1 + K] @ B.T

    def to_csv(self, path):
        cols = list(self.beta_names) + [f"gamma{k}" for k in range(self.gamma.shape[1])]
        var_names = [k for k in VARIANCE_NAMES if k in self.variance]
        cols += var_names
        if self.psi is not None:
            cols.append("psi")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + cols)
            for i in range(self.n_draws):
                row = [i] + list(self.beta[i]) + list(self.gamma[i])
                row += [self.variance[k][i] for k in var_names]
                if self.psi is not None:
                    row.append(self.psi[i])
                w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])

    def summary(self, level: float = 0.95) -> dict:
        out = {"n_draws": self.n_draws, "runtime_seconds": self.runtime,
               "acceptance": self.acceptance, "warnings": list(self.warnings),
               "config": self.config.to_dict(), "coefficients": {}, "variance": {}}
        a = (1.0 - level) / 2.0
        for j, name in enumerate(self.beta_names):
            col = self.beta[:, j]
            lo, hi = np.quantile(col, [a, 1.0 - a])
            out["coefficients"][name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1))
                                         if len(col) > 1 else float("nan"),
                                         "lower": float(lo), "upper": float(hi)}
        for name, col in self.variance.items():
            out["variance"][name] = {"mean": float(np.mean(col)),
                                     "median": float(np.median(col))}
        if self.spline_spec is None and self.config.outcome_family == "poisson":
            out["relative_rate"] = paerc_summary(self, "coefficient", level=level)
        return out

    def to_json(self, path, extra: Optional[dict] = None):
        d = self.summary()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _sweep(state: ChainState):
    ctx = state.ctx
    cfg = ctx.config
    if cfg.sample_prior:
        update_variance_block(state, include_likelihood=False)
        return
    collapsed = cfg.outcome_family == "gaussian" and cfg.has_u and ctx.dense_u
    if collapsed:
        _update_mean_collapsed(state)
    elif cfg.outcome_family == "gaussian":
        _update_beta_gaussian(state)
    else:
        _update_beta_poisson(state)
    if cfg.joint and not collapsed:
        _update_gamma(state)
    if cfg.has_u:
        if cfg.outcome_family == "gaussian":
            _update_u_gaussian(state)
        else:
            _update_u_poisson(state)
    update_variance_block(state)
    if cfg.outcome_family == "gaussian" and cfg.fixed_variance is None:
        _update_tau_eps(state)
    if ctx.penalized.any():
        spec_psi = ctx.spline_spec.psi
        if spec_psi == "estimated":
            _update_psi(state)
        else:
            state.psi = float(spec_psi)
    if ctx.censored.any():
        impute_censored(state)
    if cfg.debug:
        _check_constraints(state)


def _check_constraints(state: ChainState):
    cfg = state.ctx.config
    p = state.params
    if cfg.has_u and not cfg.joint:
        assert abs(p["phi_u"]) < 1 and p["tau_u"] > 0
    if cfg.joint:
        assert state.ctx.spectral is None or state.ctx.spectral.is_pd(
            p["phi_u"], p["phi_z"], p["rho"])
        if cfg.restrict:
            assert p["phi_z"] <= p["phi_u"]


def run_chain(config: ModelConfig, data: Dataset, graph: Optional[AdjacencyGraph] = None,
              initial: Optional[VarianceParams] = None) -> PosteriorSamples:
    """Run one chain and return the retained draws.

    Adaptation (proposal scales, the coefficient proposal covariance) runs
    during burn-in only; retained draws come from a fixed kernel.
    """
    t0 = time.perf_counter()
    ctx = _build_context(config, data, graph)
    rng = np.random.default_rng(config.chain.seed)
    state = _initial_state(ctx, rng)
    if initial is not None:
        state.params.update({k: v for k, v in initial.as_dict().items()
                             if k != "tau_eps" or config.outcome_family == "gaussian"})
    if config.joint and config.fixed_variance is None:
        p = state.params
        if not ctx.spectral.is_pd(p["phi_u"], p["phi_z"], p["rho"]):
            raise SamplerError(f"initial dependence parameters are not PD: {p}")
    ch = config.chain
    m = ch.n_retained
    p_beta = len(state.beta)
    beta_draws = np.empty((m, p_beta))
    gamma_draws = np.empty((m, len(state.gamma)))
    var_names = list(_free_variance_names(config))
    if config.outcome_family == "gaussian" and config.fixed_variance is None:
        var_names.append("tau_eps")
    var_draws = {k: np.empty(m) for k in var_names}
    psi_draws = np.empty(m) if ctx.penalized.any() else None
    n_cens = int(ctx.censored.sum())
    imputed = np.empty((m, n_cens), dtype=np.int32) if n_cens else None
    u_sum = np.zeros(ctx.n)
    u_sq = np.zeros(ctx.n)
    u_keep = []
    k = 0
    accept_at_burn = {}
    for it in range(ch.iterations):
        state.iteration = it
        state.adapting = it < ch.burn_in
        if it == ch.burn_in:
            accept_at_burn = (dict(state.accept), dict(state.tries))
        _sweep(state)
        if it >= ch.burn_in and (it - ch.burn_in) % ch.thin == 0 and k < m:
            beta_draws[k] = state.beta
            gamma_draws[k] = state.gamma
            for name in var_names:
                var_draws[name][k] = state.params[name]
            if psi_draws is not None:
                psi_draws[k] = state.psi
            if imputed is not None:
                imputed[k] = state.y[ctx.censored]
            u_sum += state.u
            u_sq += state.u * state.u
            if ch.store_u_every and k % ch.store_u_every == 0:
                u_keep.append(state.u.copy())
            k += 1
    acceptance, warn = _acceptance_after_burn(state, accept_at_burn)
    for w in warn:
        warnings.warn(w, RuntimeWarning)
    u_mean = u_sum / max(m, 1)
    u_sd = np.sqrt(np.maximum(u_sq / max(m, 1) - u_mean ** 2, 0.0))
    return PosteriorSamples(beta_draws, ctx.beta_names, gamma_draws, var_draws, psi_draws,
                            u_mean, u_sd, np.array(u_keep) if u_keep else None, imputed,
                            acceptance, config, time.perf_counter() - t0, warn,
                            ctx.spline_spec)


def _acceptance_after_burn(state: ChainState, at_burn):
    acc0, tries0 = at_burn if at_burn else ({}, {})
    out, warn = {}, []
    for block, n_try in state.tries.items():
        t = n_try - tries0.get(block, 0)
        a = state.accept[block] - acc0.get(block, 0)
        if t <= 0:
            continue
        rate = a / t
        out[block] = rate
        if rate < 0.01:
            warn.append(f"acceptance collapse in block {block!r}: {rate:.4f}")
    return out, warn


# --------------------------------------------------------------------------
# summaries

def paerc_summary(samples: PosteriorSamples, mode: str = "coefficient", grid=None,
                  level: float = 0.95, center: Optional[float] = 0.0) -> dict:
    """Relative standardized rate summaries.

    ``coefficient``: geometric mean and equal-tail interval of ``exp(beta_z)``,
    the multiplicative change in the standardized rate per unit exposure.
    ``curve-grid``: pointwise geometric mean and bands of ``exp(f(z))`` on
    ``grid`` (``f`` centred at ``center``), plus the log-scale mean curve.
    """
    a = (1.0 - level) / 2.0
    if mode == "coefficient":
        bz = samples.beta_z
        lo, hi = np.quantile(bz, [a, 1.0 - a])
        return {"relative_rate": float(np.exp(np.mean(bz))),
                "lower": float(np.exp(lo)), "upper": float(np.exp(hi)),
                "level": level, "per_unit_exposure": True}
    if mode in ("curve-grid", "curve"):
        if samples.spline_spec is None:
            raise ValueError("curve-grid mode needs a spline model")
        if grid is None:
            raise ValueError("curve-grid mode needs a grid")
        draws = samples.curve_draws(grid, center)
        lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
        mean = draws.mean(axis=0)
        return {"grid": np.asarray(grid, dtype=float), "log_mean": mean,
                "log_lower": lo, "log_upper": hi, "relative_rate": np.exp(mean),
                "lower": np.exp(lo), "upper": np.exp(hi), "level": level}
    raise ValueError(f"unknown mode {mode!r}")


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    """Monte Carlo standard error of the mean of a chain by batch means."""
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    if b < 2:
        return float(np.std(x, ddof=1) / math.sqrt(len(x)))
    means = x[:b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))
