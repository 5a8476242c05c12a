"""Command-line entry point: ``fit``, ``simulate``, ``identify`` and ``generate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (a ``diagnostics.json`` is written to the output directory).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .gibbs import ChainConfig, ConfigError, ModelConfig, PriorConfig, SamplerError, run_chain
from .graph import DegeneratePrecisionError, InvalidGraphError, read_edge_csv, write_edge_csv
from .identifiability import RingParams, identification_report
from .joint_gmrf import NonPositiveDefiniteError
from .linear_estimators import DataError, Dataset, SplineSpec, reml_fit

log = logging.getLogger("spatial_affine")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRUE_WORDS = {"1", "true", "t", "yes", "y"}
FALSE_WORDS = {"0", "false", "f", "no", "n", ""}
SEALED_MARK = ".sealed."


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# ingestion

def compute_offset(population, deaths_total: float, population_total: float,
                   ids=None) -> np.ndarray:
    """Log expected counts under internal standardization.

    ``offset_i = log(population_i * deaths_total / population_total)``.
    """
    pop = np.asarray(population, dtype=float)
    if not (deaths_total > 0 and population_total > 0):
        raise DataError("deaths_total and population_total must be positive")
    bad = np.flatnonzero(~(pop > 0))
    if len(bad):
        names = [ids[i] if ids is not None else str(i) for i in bad[:10]]
        raise DataError(f"non-positive population for unit(s): {', '.join(names)}")
    return np.log(pop * (deaths_total / population_total))


def _parse_float(cell, row, col):
    try:
        v = float(cell)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: column {col!r} is not numeric: {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {col!r} is not finite")
    return v


def _parse_flag(cell, row):
    c = str(cell).strip().lower()
    if c in TRUE_WORDS:
        return True
    if c in FALSE_WORDS:
        return False
    raise DataError(f"row {row}: censored flag {cell!r} is not a boolean")


def ingest_dataset(path, censor_threshold: int | None = None, offset: str = "auto"):
    """Read a dataset CSV with header ``id,y,z[,population][,censored],x1..xp``.

    An intercept is prepended to the ``x`` columns. Censored rows keep their
    placeholder count, which the sampler treats as latent. ``offset='auto'``
    computes the internally standardized offset when a population column is
    present, else zeros. Returns ``(dataset, ids)``.
    """
    path = Path(path)
    if SEALED_MARK in path.name:
        raise DataError(f"{path}: refusing to read a sealed truth file")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames
        if not cols:
            raise DataError(f"{path}: empty file or missing header")
        cols = [c.strip() for c in cols]
        missing = [c for c in ("id", "y", "z") if c not in cols]
        if missing:
            raise DataError(f"{path}: missing required column(s): {missing}")
        xcols = [c for c in cols if c.startswith("x") and c[1:].isdigit()]
        xcols.sort(key=lambda c: int(c[1:]))
        extra = set(cols) - {"id", "y", "z", "population", "censored"} - set(xcols)
        if extra:
            raise DataError(f"{path}: unknown column(s): {sorted(extra)}")
        rows = [{k.strip(): v for k, v in r.items()} for r in reader]
    if not rows:
        raise DataError(f"{path}: no data rows")
    ids, y, z, pop, cens, X = [], [], [], [], [], []
    for i, r in enumerate(rows, start=2):
        ids.append(r["id"].strip())
        y.append(_parse_float(r["y"], i, "y"))
        z.append(_parse_float(r["z"], i, "z"))
        if "population" in cols:
            pop.append(_parse_float(r["population"], i, "population"))
        if "censored" in cols:
            cens.append(_parse_flag(r["censored"], i))
        X.append([_parse_float(r[c], i, c) for c in xcols])
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    n = len(ids)
    y = np.array(y)
    mask = np.array(cens, dtype=bool) if cens else None
    if mask is not None and mask.any() and censor_threshold is None:
        raise DataError("censored rows present: pass --censor-threshold")
    x = np.column_stack([np.ones(n)] + ([np.array(X)] if xcols else []))
    off = None
    if offset == "auto":
        if pop:
            pop = np.array(pop)
            # crude rate over uncensored units only; censored counts are unknown
            keep = np.ones(n, dtype=bool) if mask is None else ~mask
            off = compute_offset(pop, float(y[keep].sum()), float(pop[keep].sum()), ids)
        else:
            off = np.zeros(n)
    data = Dataset(y=y, z=np.array(z), x_minus_z=x, offset=off, censor_mask=mask,
                   censor_threshold=censor_threshold, covariate_names=("intercept",) + tuple(xcols),
                   ids=tuple(ids))
    return data, ids


def ingest_graph(path, ids):
    path = Path(path)
    if SEALED_MARK in path.name:
        raise DataError(f"{path}: refusing to read a sealed truth file")
    try:
        graph, _ = read_edge_csv(path, ids)
    except InvalidGraphError as exc:
        raise DataError(str(exc)) from None
    iso = graph.isolated_nodes()
    if iso:
        raise DataError("dataset id(s) absent from the adjacency file: "
                        + ", ".join(ids[i] for i in iso[:20]))
    return graph


def write_dataset_csv(data: Dataset, path, ids=None, population=None):
    ids = list(ids) if ids is not None else [str(i) for i in range(data.n)]
    xcols = [f"x{k}" for k in range(1, data.x_minus_z.shape[1])]
    head = ["id", "y", "z"] + (["population"] if population is not None else [])
    if data.censor_mask is not None:
        head.append("censored")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head + xcols)
        for i in range(data.n):
            row = [ids[i], f"{data.y[i]:.10g}", f"{data.z[i]:.10g}"]
            if population is not None:
                row.append(f"{population[i]:.10g}")
            if data.censor_mask is not None:
                row.append("1" if data.censor_mask[i] else "0")
            row += [f"{v:.10g}" for v in data.x_minus_z[i, 1:]]
            w.writerow(row)


# --------------------------------------------------------------------------
# subcommands

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _model_config(args) -> ModelConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    cfg = ModelConfig.from_dict(base) if base else ModelConfig()
    spline = cfg.spline
    if args.spline:
        spline = SplineSpec()
    chain = cfg.chain
    if spline is not None and not args.config:
        # semiparametric default: 5000 burn-in, 10000 retained
        chain = ChainConfig(15000, 5000)
    chain = ChainConfig(args.iterations or chain.iterations,
                        chain.burn_in if args.burn_in is None else args.burn_in,
                        args.thin or chain.thin, args.seed)
    priors = cfg.priors
    if args.flat_tau_prior:
        priors = PriorConfig(priors.beta_sd, None, None, priors.kappa_rate, priors.surrogate,
                             priors.use_kappa)
    return ModelConfig(args.family or cfg.outcome_family, args.model or cfg.estimator,
                       args.exposure_transform or cfg.exposure_transform_for_joint,
                       spline, priors, chain)


def cmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in (args.data, args.adjacency, args.config):
        if p and SEALED_MARK in Path(p).name:
            raise DataError(f"{p}: fit refuses to read sealed truth files")
    data, ids = ingest_dataset(args.data, args.censor_threshold)
    graph = ingest_graph(args.adjacency, ids) if args.adjacency else None
    t0 = time.perf_counter()
    if args.method == "reml":
        tag = args.model or "Affine-RS"
        if graph is None:
            raise ConfigError("REML fits need --adjacency")
        res = reml_fit(data, graph, tag, seed=args.seed)
        report = {"method": "reml", "seed": args.seed, "config": vars_clean(args),
                  "fit": res.summary(), "runtime_seconds": time.perf_counter() - t0,
                  "version": __version__}
        _write_json(out / "fit.json", report)
        print(f"beta_z = {res.beta_z:.4f}  ({res.ci[0][0]:.4f}, {res.ci[0][1]:.4f})")
        return EXIT_OK
    cfg = _model_config(args)
    samples = run_chain(cfg, data, graph)
    extra = {"method": "bayes", "seed": args.seed, "cli": vars_clean(args),
             "version": __version__, "n": data.n}
    samples.to_json(out / "fit.json", extra)
    samples.to_csv(out / "samples.csv")
    with open(out / "samples.csv", "a") as fh:
        fh.write(f"# config={json.dumps(cfg.to_dict(), default=_json_default)}\n")
    summ = samples.summary()
    if "relative_rate" in summ:
        rr = summ["relative_rate"]
        print(f"exp(beta_z) = {rr['relative_rate']:.4f}  ({rr['lower']:.4f}, {rr['upper']:.4f})")
    else:
        c = summ["coefficients"]
        if "z" in c:
            print(f"beta_z = {c['z']['mean']:.4f}  ({c['z']['lower']:.4f}, {c['z']['upper']:.4f})")
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_simulate(args) -> int:
    from .simgen import bayes_estimator, gm_catalog, nonlinear_config, reml_estimator, run_study

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.gm == "nonlinear":
        config = nonlinear_config(args.n)
    else:
        by_id = {c.gm_id: c for c in gm_catalog(args.n)}
        if args.gm not in by_id:
            raise ConfigError(f"unknown mechanism {args.gm!r}")
        config = by_id[args.gm]
    names = [e.strip() for e in args.estimators.split(",") if e.strip()]
    if not names:
        raise ConfigError("no estimators given")
    if args.method == "reml":
        config = config.with_(outcome_family="gaussian")
        ests = [reml_estimator(e) for e in names]
    else:
        long_burn = args.gm == "nonlinear"
        chain = ChainConfig(args.iterations or (15000 if long_burn else 11000),
                            (5000 if long_burn else 1000) if args.burn_in is None
                            else args.burn_in, args.thin)
        spline = SplineSpec() if args.gm == "nonlinear" else None
        for e in names:
            ModelConfig(estimator=e)
        ests = [bayes_estimator(e, chain=chain, spline=spline) for e in names]
    summary = run_study(config, ests, args.reps, master_seed=args.seed,
                        parallelism=args.parallelism)
    summary.to_csv(out / "study.csv")
    with open(out / "study.csv", "a") as fh:
        fh.write(f"# seed={args.seed} config={json.dumps(vars_clean(args))}\n")
    summary.to_json(out / "study.json")
    for r in summary.table():
        print(f"{r['Mechanism']:>9} {r['Estimator']:>12}  bias {r['Bias']:+.3f}  "
              f"se {r['Std. Err.']:.3f}  rmse {r['RMSE']:.3f}  cover {r['95% CI Coverage']:.2f}")
    return EXIT_OK


def cmd_identify(args) -> int:
    params = RingParams(args.n, args.tauU, args.phiU, args.tauZ, args.phiZ, args.rho,
                        args.tauEps, args.betaZ)
    rep = identification_report(params, tol=args.tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = rep.to_dict()
    d["config"] = vars_clean(args)
    d["seed"] = args.seed
    _write_json(out / "identify.json", d)
    print(rep.verdict)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .simgen import gm_catalog, generate_dataset, nonlinear_config

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.gm == "nonlinear":
        config = nonlinear_config(args.n, args.seed)
    else:
        by_id = {c.gm_id: c for c in gm_catalog(args.n)}
        if args.gm not in by_id:
            raise ConfigError(f"unknown mechanism {args.gm!r}")
        config = by_id[args.gm].with_(seed=args.seed)
    data, truth = generate_dataset(config)
    ids = [f"s{i:05d}" for i in range(data.n)]
    write_dataset_csv(data, out / "data.csv", ids)
    write_edge_csv(config.get_graph(), out / "adjacency.csv", ids)
    truth.to_json(out / "truth.sealed.json")
    _write_json(out / "generate.json", {"config": config.to_dict(), "seed": args.seed,
                                        "version": __version__})
    print(out / "data.csv")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatial-affine",
                                description="Affine estimator for spatially confounded exposures.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--adjacency")
    f.add_argument("--config", help="JSON model config")
    f.add_argument("--model", help="estimator (bayes: nonspatial, spatial, spatial-rs, affine, "
                                   "affine-rs; reml: OLS, GLS, GLS-RS, Affine, Affine-RS)")
    f.add_argument("--method", choices=("bayes", "reml"), default="bayes")
    f.add_argument("--family", choices=("poisson", "gaussian"))
    f.add_argument("--exposure-transform", choices=("identity", "log"))
    f.add_argument("--spline", action="store_true", help="semiparametric exposure effect")
    f.add_argument("--censor-threshold", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--flat-tau-prior", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", default="out")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="replicated simulation study")
    s.add_argument("--gm", required=True)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--estimators", default="nonspatial,spatial-rs,affine-rs")
    s.add_argument("--method", choices=("bayes", "reml"), default="bayes")
    s.add_argument("--iterations", type=int, help="default 11000 (15000 for nonlinear)")
    s.add_argument("--burn-in", type=int, help="default 1000 (5000 for nonlinear)")
    s.add_argument("--thin", type=int, default=1)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("identify", help="identification report on a ring")
    i.add_argument("--n", type=int, default=400)
    i.add_argument("--phiU", type=float, required=True)
    i.add_argument("--phiZ", type=float, required=True)
    i.add_argument("--rho", type=float, required=True)
    i.add_argument("--tauU", type=float, default=1.0)
    i.add_argument("--tauZ", type=float, default=1.0)
    i.add_argument("--tauEps", type=float, default=1.0)
    i.add_argument("--betaZ", type=float, default=1.0)
    i.add_argument("--tol", type=float, default=1e-6)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default="out")
    i.set_defaults(func=cmd_identify)

    g = sub.add_parser("generate", help="write a synthetic dataset and its sealed truth")
    g.add_argument("--gm", required=True)
    g.add_argument("--n", type=int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="out")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidGraphError, DegeneratePrecisionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SamplerError, NonPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError,
            NumericalFailure) as exc:
        out = Path(getattr(args, "out", "."))
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "diagnostics.json", {"error": f"{type(exc).__name__}: {exc}",
                                               "traceback": traceback.format_exc(),
                                               "config": vars_clean(args)})
        print(f"numerical failure: {exc} (see {out / 'diagnostics.json'})", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
