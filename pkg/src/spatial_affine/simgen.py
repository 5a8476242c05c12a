"""Synthetic data under the benchmark generative mechanisms, and replicated studies."""
from __future__ import annotations

import csv
import json
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .graph import AdjacencyGraph, CarParams, car_precision, ring
from .joint_gmrf import build_joint_precision
from .linear_estimators import Dataset

GM_IDS = ("GM1", "GM2", "GM3", "GM4", "GM5", "GM6", "nonlinear")


@dataclass(frozen=True)
class GenerativeConfig:
    """One data-generating mechanism.

    ``params`` holds ``(tau_u, phi_u, tau_z, phi_z, rho)``. For ``GM5`` only
    ``tau_u`` and ``phi_u`` are used (they describe the marginal law of U).
    ``xu_correlated`` sets the mean of U to X.
    """

    gm_id: str
    n: int = 300
    params: tuple = (1.0, 0.5, 1.0, 0.2, 0.3)
    beta_z: float = 1.0
    outcome_family: str = "poisson"
    seed: int = 0
    graph: Optional[AdjacencyGraph] = None
    xu_correlated: bool = False
    tau_eps: float = 1.0

    def __post_init__(self):
        if self.gm_id not in GM_IDS:
            raise ValueError(f"gm_id must be one of {GM_IDS}")
        if self.outcome_family not in ("poisson", "gaussian"):
            raise ValueError("outcome_family must be 'poisson' or 'gaussian'")
        if len(self.params) != 5:
            raise ValueError("params must be (tau_u, phi_u, tau_z, phi_z, rho)")
        if self.graph is not None and self.graph.n != self.n:
            raise ValueError("graph size does not match n")

    def get_graph(self) -> AdjacencyGraph:
        return self.graph if self.graph is not None else _ring_cached(self.n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["graph"] = None if self.graph is None else f"<graph n={self.graph.n}>"
        d["params"] = dict(zip(("tau_u", "phi_u", "tau_z", "phi_z", "rho"), self.params))
        return d

    def with_(self, **kw) -> "GenerativeConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return GenerativeConfig(**d)


_RINGS: dict = {}


def _ring_cached(n):
    if n not in _RINGS:
        _RINGS[n] = ring(n)
    return _RINGS[n]


def gm_catalog(n: int = 300) -> list:
    """The six linear mechanisms."""
    return [
        GenerativeConfig("GM1", n, (1.0, 0.5, 1.0, 0.2, 0.0)),
        GenerativeConfig("GM2", n, (1.0, 0.5, 1.0, 0.2, 0.3)),
        GenerativeConfig("GM3", n, (1.0, 0.2, 1.0, 0.5, 0.3)),
        GenerativeConfig("GM4", n, (1.0, 0.35, 1.0, 0.35, 0.3)),
        GenerativeConfig("GM5", n, (1.0, 0.5, 1.0, 0.0, 0.0)),
        GenerativeConfig("GM6", n, (1.0, 0.5, 1.0, 0.2, 0.3)),
    ]


def nonlinear_config(n: int = 300, seed: int = 0) -> GenerativeConfig:
    return GenerativeConfig("nonlinear", n, (1.0, 0.5, 1.0, 0.2, 0.3), beta_z=float("nan"),
                            seed=seed)


def nonlinear_truth(z):
    """Antisymmetric sigmoid with asymptotes -1 and 1."""
    z = np.asarray(z, dtype=float)
    out = 2.0 / (1.0 + np.exp(-6.0 * z)) - 1.0
    return float(out) if out.ndim == 0 else out


class SealedTruth:
    """Latent quantities used only for scoring.

    Values are reachable through :meth:`reveal`; estimators receive a
    :class:`Dataset`, which has no slot for them.
    """

    __slots__ = ("_payload",)

    def __init__(self, **payload):
        object.__setattr__(self, "_payload", dict(payload))

    def __setattr__(self, key, value):
        raise AttributeError("sealed truth is read-only")

    def __repr__(self):
        return f"SealedTruth(<{len(self._payload)} sealed fields>)"

    def reveal(self, key: str):
        return self._payload[key]

    def keys(self):
        return tuple(self._payload)

    def to_json(self, path):
        if ".sealed." not in str(path):
            raise ValueError("sealed truth files must carry '.sealed.' in their name")
        with open(path, "w") as fh:
            json.dump({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                       for k, v in self._payload.items()}, fh)


def _sample_precision(P: np.ndarray, rng) -> np.ndarray:
    L = scipy.linalg.cholesky(P, lower=True)
    return scipy.linalg.solve_triangular(L, rng.standard_normal(P.shape[0]),
                                         lower=True, trans="T")


def _joint_draw(graph, params, rng):
    tau_u, phi_u, tau_z, phi_z, rho = params
    jp = build_joint_precision(graph, CarParams(tau_u, phi_u), CarParams(tau_z, phi_z), rho)
    x = _sample_precision(jp.full.toarray(), rng)
    return x[:graph.n], x[graph.n:]


def _seed_of(config: GenerativeConfig, seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(config.seed if seed is None else seed)


def generate_dataset(config: GenerativeConfig, seed=None) -> tuple[Dataset, SealedTruth]:
    """Draw one dataset; return the observable part and the sealed truth."""
    rng = _seed_of(config, seed)
    graph = config.get_graph()
    n = graph.n
    x = rng.uniform(-0.5, 0.5, n)
    gm = config.gm_id
    if gm == "GM5":
        tau_u, phi_u = config.params[:2]
        u = _sample_precision(car_precision(graph, CarParams(tau_u, phi_u)).toarray(), rng)
        z = u + x + rng.standard_normal(n)
        latent = u
    else:
        v, zc = _joint_draw(graph, config.params, rng)
        z = x + zc
        latent = v
        # GM6: the Gaussian field stands in for tan(U)
        u = np.arctan(v) if gm == "GM6" else v
    if config.xu_correlated:
        u = u + x
    if gm == "nonlinear":
        eta = nonlinear_truth(z) + u
    else:
        eta = config.beta_z * z + x + u
    if config.outcome_family == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
        offset = np.zeros(n)
    else:
        y = eta + rng.standard_normal(n) / math.sqrt(config.tau_eps)
        offset = None
    data = Dataset(y=y, z=z, x_minus_z=np.column_stack([np.ones(n), x]), offset=offset,
                   covariate_names=("intercept", "x"))
    truth = SealedTruth(u=u, latent=latent, beta_z=config.beta_z, gm_id=gm,
                        curve="sigmoid" if gm == "nonlinear" else None)
    return data, truth


# --------------------------------------------------------------------------
# studies

CURVE_GRID = np.linspace(-1.5, 1.5, 101)


@dataclass
class EstimatorSpec:
    """A named estimator: ``fit(data, graph, seed)`` returns a dict.

    Linear estimators return ``estimate``, ``lower`` and ``upper`` for the
    exposure coefficient. Curve estimators return ``curve``, ``lower`` and
    ``upper`` evaluated on :data:`CURVE_GRID`.
    """

    name: str
    fit: Callable
    kind: str = "linear"


@dataclass
class SimulationSummary:
    mechanism: str
    rows: dict
    reps: int
    runtime: float
    master_seed: int
    config: dict
    errors: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def table(self) -> list:
        out = []
        for name, r in self.rows.items():
            out.append({"Mechanism": self.mechanism, "Estimator": name, "Bias": r["bias"],
                        "Std. Err.": r["se"], "RMSE": r["rmse"],
                        "95% CI Coverage": r["coverage"], "Failures": r["failures"]})
        return out

    def to_csv(self, path, append: bool = False):
        rows = self.table()
        mode = "a" if append else "w"
        with open(path, mode, newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            if not append or fh.tell() == 0:
                w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})

    def to_json(self, path):
        d = {"mechanism": self.mechanism, "reps": self.reps, "runtime_seconds": self.runtime,
             "master_seed": self.master_seed, "config": self.config, "rows": self.rows,
             "per_rep_errors": self.errors, "failures": self.failures}
        if self.curves:
            d["curves"] = {k: {kk: np.asarray(vv).tolist() for kk, vv in v.items()}
                           for k, v in self.curves.items()}
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, default=_default)


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def aggregate(errors, covered) -> dict:
    """Bias, spread across replicates, RMSE and coverage from per-rep errors."""
    e = np.asarray(errors, dtype=float)
    c = np.asarray(covered, dtype=float)
    m = len(e)
    if m == 0:
        return {"bias": float("nan"), "se": float("nan"), "rmse": float("nan"),
                "coverage": float("nan")}
    bias = float(e.mean())
    se = float(e.std(ddof=1)) if m > 1 else float("nan")
    rmse = float(math.sqrt(np.mean(e * e)))
    return {"bias": bias, "se": se, "rmse": rmse, "coverage": float(c.mean())}


def rep_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(rep)])


def _one_rep(config, estimators, master_seed, rep):
    ss = rep_seed(master_seed, rep)
    data_ss, *fit_ss = ss.spawn(1 + len(estimators))
    data, truth = generate_dataset(config, np.random.default_rng(data_ss))
    graph = config.get_graph()
    out = {}
    for spec, s in zip(estimators, fit_ss):
        seed = int(s.generate_state(1)[0])
        try:
            # only the observable dataset crosses this line
            assert isinstance(data, Dataset)
            out[spec.name] = ("ok", spec.fit(data, graph, seed))
        except Exception as exc:  # recorded per replicate
            out[spec.name] = ("fail", f"{type(exc).__name__}: {exc}\n"
                              + traceback.format_exc(limit=2))
    return out, truth


def run_study(config: GenerativeConfig, estimators: list, reps: int, master_seed: int = 0,
              parallelism: int = 1, progress: Optional[Callable] = None) -> SimulationSummary:
    """Replicate ``generate -> fit -> score`` and aggregate per estimator."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    t0 = time.perf_counter()
    results = []
    if parallelism > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(parallelism) as ex:
            futs = [ex.submit(_one_rep, config, estimators, master_seed, r) for r in range(reps)]
            results = [f.result() for f in futs]
    else:
        for r in range(reps):
            results.append(_one_rep(config, estimators, master_seed, r))
            if progress is not None:
                progress(r + 1, reps)
    rows, errs, fails, curves = {}, {}, {}, {}
    for spec in estimators:
        e, cov, f = [], [], []
        curve_stack, lo_stack, hi_stack = [], [], []
        for r, (out, truth) in enumerate(results):
            status, val = out[spec.name]
            if status != "ok":
                f.append({"rep": r, "error": val})
                continue
            if spec.kind == "linear":
                b = truth.reveal("beta_z")
                e.append(val["estimate"] - b)
                cov.append(val["lower"] <= b <= val["upper"])
            else:
                curve_stack.append(val["curve"])
                lo_stack.append(val["lower"])
                hi_stack.append(val["upper"])
        if spec.kind == "linear":
            row = aggregate(e, cov)
            errs[spec.name] = e
        else:
            row, curves[spec.name] = _curve_aggregate(curve_stack, lo_stack, hi_stack)
        row["failures"] = len(f)
        row["reps_used"] = reps - len(f)
        rows[spec.name] = row
        fails[spec.name] = f
    return SimulationSummary(config.gm_id, rows, reps, time.perf_counter() - t0, master_seed,
                             config.to_dict(), errs, fails, curves)


def _curve_aggregate(curves, lows, highs):
    if not curves:
        nan = float("nan")
        return {"bias": nan, "se": nan, "rmse": nan, "coverage": nan, "mad": nan}, {}
    C = np.asarray(curves)
    lo, hi = np.asarray(lows), np.asarray(highs)
    truth = nonlinear_truth(CURVE_GRID)
    covered = (lo <= truth) & (truth <= hi)
    err = C - truth
    region = np.abs(CURVE_GRID) <= 0.75 + 1e-12
    mean_curve = C.mean(axis=0)
    row = {"bias": float(np.mean(err[:, region])),
           "se": float(np.mean(C[:, region].std(axis=0, ddof=1))) if len(C) > 1 else float("nan"),
           "rmse": float(np.sqrt(np.mean(err[:, region] ** 2))),
           "coverage": float(covered[:, region].mean()),
           "mad": float(np.mean(np.abs(mean_curve[region] - truth[region])))}
    detail = {"grid": CURVE_GRID, "mean_curve": mean_curve,
              "q025": np.quantile(C, 0.025, axis=0), "q975": np.quantile(C, 0.975, axis=0),
              "pointwise_coverage": covered.mean(axis=0), "truth": truth}
    return row, detail


def coverage_at(summary: SimulationSummary, name: str, z: float) -> float:
    d = summary.curves[name]
    k = int(np.argmin(np.abs(CURVE_GRID - z)))
    return float(d["pointwise_coverage"][k])


# ---- standard estimator specs -------------------------------------------

def bayes_estimator(estimator: str, chain=None, priors=None, name: Optional[str] = None,
                    spline=None, level: float = 0.95) -> EstimatorSpec:
    """Bayesian Poisson estimator used in the benchmark tables."""
    from .gibbs import ChainConfig, ModelConfig, PriorConfig

    chain = chain or ChainConfig()
    priors = priors or PriorConfig.flat()
    a = (1.0 - level) / 2.0

    def fit(data, graph, seed):
        cfg = ModelConfig("poisson", estimator, spline=spline, priors=priors,
                          chain=ChainConfig(chain.iterations, chain.burn_in, chain.thin, seed))
        from .gibbs import run_chain
        s = run_chain(cfg, data, graph)
        if spline is None:
            bz = s.beta_z
            lo, hi = np.quantile(bz, [a, 1 - a])
            return {"estimate": float(bz.mean()), "lower": float(lo), "upper": float(hi)}
        draws = s.curve_draws(CURVE_GRID, center=0.0)
        lo, hi = np.quantile(draws, [a, 1 - a], axis=0)
        return {"curve": draws.mean(axis=0), "lower": lo, "upper": hi}

    return EstimatorSpec(name or _DISPLAY.get(estimator, estimator), fit,
                         "linear" if spline is None else "curve")


def reml_estimator(estimator: str, level: float = 0.95, n_starts: int = 3,
                   name: Optional[str] = None) -> EstimatorSpec:
    """Point estimators from restricted likelihood (Gaussian outcomes)."""
    from .linear_estimators import reml_fit

    def fit(data, graph, seed):
        res = reml_fit(data, graph, estimator, level=level, n_starts=n_starts, seed=seed)
        lo, hi = res.ci[0]
        return {"estimate": float(res.beta_z), "lower": float(lo), "upper": float(hi)}

    return EstimatorSpec(name or estimator, fit)


_DISPLAY = {"nonspatial": "Non-spatial", "spatial": "Spatial", "spatial-rs": "Spatial-RS",
            "affine": "Affine", "affine-rs": "Affine-RS"}


# ---- county-scale synthetic data ----------------------------------------

COUNTY_PARAMS = (4.0, 0.95, 4.0, 0.6, 0.12)


def synthetic_county(n: int = 3109, seed: int = 2024, beta_z: float = 0.01,
                     censor_threshold: int = 10):
    """County-like areal dataset on a Delaunay adjacency of random sites.

    The exposure is positive with a log-scale joint CAR law; outcomes are
    Poisson counts with an internally standardized offset, and counts below
    ``censor_threshold`` are suppressed. Returns ``(dataset, graph, ids,
    population, truth)``.
    """
    from scipy.spatial import Delaunay

    from .graph import from_edge_list

    rng = np.random.default_rng(seed)
    pts = rng.uniform([0.0, 0.0], [60.0, 35.0], size=(n, 2))
    tri = Delaunay(pts)
    edges = set()
    for s in tri.simplices:
        for a, b in ((s[0], s[1]), (s[1], s[2]), (s[0], s[2])):
            edges.add((min(a, b), max(a, b)))
    graph = from_edge_list(n, sorted(edges))
    x = rng.standard_normal((n, 3))
    v, zc = _joint_draw(graph, COUNTY_PARAMS, rng)
    log_z = math.log(8.0) + 0.1 * x[:, 0] + zc
    z = np.exp(log_z)
    population = np.round(np.exp(rng.normal(8.3, 1.1, n))) + 50.0
    base_rate = 0.045
    eta = (np.log(population * base_rate) + beta_z * (z - z.mean())
           + x @ np.array([0.05, -0.03, 0.02]) + 0.5 * v)
    y = rng.poisson(np.exp(eta)).astype(float)
    censored = y < censor_threshold
    y_obs = np.where(censored, 0.0, y)
    ids = [f"c{i:05d}" for i in range(n)]
    observed = y_obs[~censored]
    offset = np.log(population * observed.sum() / population[~censored].sum())
    data = Dataset(y=y_obs, z=z, x_minus_z=np.column_stack([np.ones(n), x]), offset=offset,
                   censor_mask=censored, censor_threshold=censor_threshold,
                   covariate_names=("intercept", "x1", "x2", "x3"), ids=tuple(ids))
    truth = SealedTruth(u=0.5 * v, beta_z=beta_z, y_full=y)
    return data, graph, ids, population, truth


def bundled_county_paths() -> dict:
    """Paths of the packaged county-scale example (dataset and adjacency CSVs)."""
    from importlib import resources

    root = resources.files("spatial_affine") / "data"
    return {"data": str(root / "county_synth.csv"),
            "adjacency": str(root / "county_synth_adjacency.csv")}
