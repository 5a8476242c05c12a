"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``[criterion k] PASS|FAIL`` line to the terminal. The
long simulation criteria (6, 8, 9) are marked ``slow``; deselect them with
``-m "not slow"``. Study tables are also written to ``acceptance_results/``.
"""
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from spatial_affine.cli import main as cli_main
from spatial_affine.gibbs import (ChainConfig, ModelConfig, PriorConfig, batch_means_se,
                                  run_chain)
from spatial_affine.graph import ring
from spatial_affine.identifiability import (RingParams, car_ring_determinant,
                                            identification_report, limit_prec_z_entry,
                                            limit_var_y_given_z_entry, nonspatial_closed_form,
                                            nonspatial_flatness_check, nonspatial_maximize,
                                            population_moments, ring_inverse_limit_entry,
                                            stdc_determinant)
from spatial_affine.linear_estimators import (Dataset, affine_fit_reml, gls_estimate, gls_fit,
                                              ols_fit)
from spatial_affine.simgen import (bayes_estimator, bundled_county_paths, coverage_at,
                                   generate_dataset, gm_catalog, nonlinear_config, run_study)

RESULTS = Path(__file__).resolve().parent.parent / "acceptance_results"


@pytest.fixture
def report(capsys):
    def _report(k, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {k}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return _report


def _ring_matrix(n, phi):
    A = 2.0 * np.eye(n)
    idx = np.arange(n)
    A[idx, (idx + 1) % n] = -phi
    A[(idx + 1) % n, idx] = -phi
    return A


def _tridiag(n, phi):
    return 2.0 * np.eye(n) - phi * (np.eye(n, k=1) + np.eye(n, k=-1))


def test_criterion_1_matrix_identities(report):
    t0 = time.perf_counter()
    worst_det = 0.0
    for n in range(3, 41):
        for phi in (-0.9, -0.5, 0.0, 0.5, 0.9):
            for ours, mat in ((car_ring_determinant(n, phi), _ring_matrix(n, phi)),
                              (stdc_determinant(n, phi), _tridiag(n, phi))):
                dense = np.linalg.det(mat)
                worst_det = max(worst_det, abs(ours - dense) / abs(dense))
    worst_inv = 0.0
    for phi in (-0.9, -0.5, 0.0, 0.5, 0.9):
        inv = np.linalg.inv(_ring_matrix(500, phi))
        for lag in range(0, 8):
            worst_inv = max(worst_inv, abs(ring_inverse_limit_entry(lag, phi) - inv[250, 250 + lag]))
        p = RingParams(500, tau_u=1.7, phi_u=phi)
        G_inv = inv / p.tau_u
        for lag in range(1, 8):
            worst_inv = max(worst_inv, abs(limit_var_y_given_z_entry(lag, p) - G_inv[250, 250 + lag]))
    dt = time.perf_counter() - t0
    ok = worst_det <= 1e-9 and worst_inv <= 1e-8 and dt < 10
    report(1, ok, f"max det rel err {worst_det:.2e} (<=1e-9), max inverse err {worst_inv:.2e} "
                  f"(<=1e-8), {dt:.1f}s (<10s)")


def test_criterion_2_limit_precision(report):
    t0 = time.perf_counter()
    worst = 0.0
    for k in (1, 3):  # GM2 and GM4
        tu, pu, tz, pz, rho = gm_catalog(400)[k].params
        p = RingParams(400, tu, pu, tz, pz, rho)
        P = population_moments(p).prec_z
        for i in (150, 200, 250):
            for lag in range(0, 8):
                worst = max(worst, abs(limit_prec_z_entry(lag, p) - P[i, i + lag]))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 30
    report(2, ok, f"GM2/GM4 max interior error {worst:.2e} (<=1e-6), {dt:.1f}s (<30s)")


def test_criterion_3_collapse_chain(report):
    worst_affine, worst_ols = 0.0, 0.0
    for seed in range(10):
        cfg = gm_catalog(60)[1].with_(outcome_family="gaussian")
        data, _ = generate_dataset(cfg, 500 + seed)
        g = cfg.get_graph()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = affine_fit_reml(data, g, fix_rho=0.0, n_starts=2, seed=seed)
            b = gls_fit(data, g, n_starts=2, seed=seed)
        worst_affine = max(worst_affine, float(np.max(np.abs(a.beta - b.beta))))
        beta_i, _ = gls_estimate(data.design, data.y, np.eye(data.n))
        worst_ols = max(worst_ols, float(np.max(np.abs(beta_i - ols_fit(data).beta))))
    ok = worst_affine <= 1e-12 and worst_ols <= 1e-12
    report(3, ok, f"affine(rho=0) vs GLS {worst_affine:.1e}, GLS(I) vs OLS {worst_ols:.1e} "
                  "(<=1e-12, 10 datasets)")


def test_criterion_4_flatness(report):
    rng = np.random.default_rng(50)
    n = 50
    x = rng.uniform(-0.5, 0.5, n)
    z = rng.standard_normal(n)
    data = Dataset(y=0.3 + z + x + rng.standard_normal(n), z=z,
                   x_minus_z=np.column_stack([np.ones(n), x]))
    spread = nonspatial_flatness_check(data, curve_points=100)
    s2, phi = nonspatial_closed_form(data)
    X = data.design
    H = X @ np.linalg.solve(X.T @ X, X.T)
    s2_formula = data.y @ (np.eye(n) - H) @ data.y / (n - X.shape[1])
    phi_formula = n / (z @ z)
    s2_num, phi_num = nonspatial_maximize(data)
    err = max(abs(s2_num - s2_formula), abs(phi_num - phi_formula),
              abs(s2 - s2_formula), abs(phi - phi_formula))
    ok = spread < 1e-8 and err <= 1e-6
    report(4, ok, f"likelihood spread {spread:.1e} (<1e-8), maximizer error {err:.1e} (<=1e-6)")


def test_criterion_5_identification(report):
    tu, pu, tz, pz, rho = gm_catalog(400)[1].params
    rep = identification_report(RingParams(400, tu, pu, tz, pz, rho, tau_eps=1.0, beta_z=1.0))
    worst = max(abs(v) for v in rep.errors.values())
    null = identification_report(RingParams(400, tu, 0.0, tz, 0.0, 0.0))
    ok = (rep.verdict == "identifiable" and len(rep.errors) == 7 and worst <= 1e-3
          and null.verdict == "non-identifiable")
    report(5, ok, f"GM2 n=400 max recovery error {worst:.1e} (<=1e-3); "
                  f"zero-dependence case -> {null.verdict!r}")


def test_criterion_7_gaussian_cross_validation(report):
    cfg = gm_catalog(100)[1].with_(outcome_family="gaussian")
    g = cfg.get_graph()
    worst = 0.0
    for seed in range(10):
        data, _ = generate_dataset(cfg, 1000 + seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = affine_fit_reml(data, g)
        mc = ModelConfig("gaussian", "affine", priors=PriorConfig.flat(beta_sd=math.inf),
                         chain=ChainConfig(21000, 1000, seed=seed),
                         fixed_variance=fit.variance_params)
        s = run_chain(mc, data, g, initial=fit.variance_params)
        for j in range(s.beta.shape[1]):
            z = abs(s.beta[:, j].mean() - fit.beta[j]) / batch_means_se(s.beta[:, j])
            worst = max(worst, z)

    # prior recovery: likelihood off, gamma precisions, uniform dependence parameters
    data, g40 = generate_dataset(gm_catalog(40)[1].with_(outcome_family="gaussian"), 0)[0], ring(40)
    pvals = {}
    sp = run_chain(ModelConfig("gaussian", "spatial", sample_prior=True,
                               chain=ChainConfig(42000, 2000, thin=20, seed=5)), data, g40)
    pvals["spatial tau_u"] = stats.kstest(sp.variance["tau_u"], stats.gamma(5.0, scale=0.2).cdf).pvalue
    pvals["spatial phi_u"] = stats.kstest(sp.variance["phi_u"], stats.uniform(-1, 2).cdf).pvalue
    aff = run_chain(ModelConfig("gaussian", "affine", sample_prior=True,
                                priors=PriorConfig(use_kappa=False),
                                chain=ChainConfig(82000, 2000, thin=40, seed=6)), data, g40)
    pvals["affine tau_z"] = stats.kstest(aff.variance["tau_z"], stats.gamma(5.0, scale=0.2).cdf).pvalue
    # oracle: uniform draws on the cube kept when the joint precision is PD
    rng = np.random.default_rng(7)
    cube = rng.uniform(-1, 1, (200000, 3))
    lam = np.cos(2 * np.pi * np.arange(40) / 40)
    m = (1 - np.outer(cube[:, 0], lam)) * (1 - np.outer(cube[:, 1], lam)) - cube[:, 2:3] ** 2
    kept = cube[m.min(axis=1) > 0][:4000]
    for j, name in enumerate(("phi_u", "phi_z", "rho")):
        pvals[f"affine {name}"] = stats.ks_2samp(aff.variance[name], kept[:, j]).pvalue
    ok = worst <= 3.0 and min(pvals.values()) > 0.01
    report(7, ok, f"max |Gibbs - REML| / MC-SE over 10 datasets = {worst:.2f} (<=3); "
                  f"min prior KS p-value {min(pvals.values()):.3f} (>0.01)")


def _flat_chain():
    return ChainConfig(11000, 1000)


@pytest.mark.slow
def test_criterion_6_table_replication(report):
    RESULTS.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gm2 = run_study(gm_catalog(300)[1],
                        [bayes_estimator(e, chain=_flat_chain())
                         for e in ("nonspatial", "spatial-rs", "affine-rs")],
                        100, master_seed=2)
        gm1 = run_study(gm_catalog(300)[0],
                        [bayes_estimator(e, chain=_flat_chain())
                         for e in ("nonspatial", "spatial", "spatial-rs", "affine", "affine-rs")],
                        100, master_seed=1)
    hours = (time.perf_counter() - t0) / 3600
    gm1.to_csv(RESULTS / "table_gm1_gm2.csv")
    gm2.to_csv(RESULTS / "table_gm1_gm2.csv", append=True)
    gm1.to_json(RESULTS / "study_gm1.json")
    gm2.to_json(RESULTS / "study_gm2.json")
    r = gm2.rows
    checks = {
        "GM2 Non-spatial bias in [0.29, 0.45]": 0.29 <= r["Non-spatial"]["bias"] <= 0.45,
        "GM2 Affine-RS bias in [0.05, 0.25]": 0.05 <= r["Affine-RS"]["bias"] <= 0.25,
        "|bias Affine-RS| < |bias Spatial-RS|":
            abs(r["Affine-RS"]["bias"]) < abs(r["Spatial-RS"]["bias"]),
        "Affine-RS coverage >= 0.88": r["Affine-RS"]["coverage"] >= 0.88,
        "GM1 all |bias| <= 0.06": all(abs(v["bias"]) <= 0.06 for v in gm1.rows.values()),
        "budget <= 4 h": hours <= 4.0,
        "no failed fits": all(v["failures"] == 0 for v in list(r.values()) + list(gm1.rows.values())),
    }
    table = "; ".join(f"{s.mechanism} {k} bias {v['bias']:+.3f} cover {v['coverage']:.2f}"
                      for s in (gm2, gm1) for k, v in s.rows.items())
    failed = [k for k, v in checks.items() if not v]
    report(6, not failed, f"{table}; {hours:.2f} h" + (f"; failed: {failed}" if failed else ""))


@pytest.mark.slow
def test_criterion_8_nonlinear(report):
    from spatial_affine.linear_estimators import SplineSpec

    RESULTS.mkdir(exist_ok=True)
    chain = ChainConfig(15000, 5000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = run_study(nonlinear_config(300),
                      [bayes_estimator(e, chain=chain, spline=SplineSpec())
                       for e in ("spatial-rs", "affine-rs")], 50, master_seed=8)
    s.to_json(RESULTS / "study_nonlinear.json")
    mad_a, mad_s = s.rows["Affine-RS"]["mad"], s.rows["Spatial-RS"]["mad"]
    cov = [coverage_at(s, "Affine-RS", z) for z in (-0.5, 0.5)]
    ok = mad_a < mad_s and min(cov) >= 0.80
    report(8, ok, f"MAD Affine-RS {mad_a:.4f} < Spatial-RS {mad_s:.4f}; Affine-RS coverage at "
                  f"z=-0.5/+0.5 {cov[0]:.2f}/{cov[1]:.2f} (>=0.80)")


@pytest.mark.slow
def test_criterion_9_county_pipeline(report, tmp_path):
    paths = bundled_county_paths()
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = cli_main(["fit", "--data", paths["data"], "--adjacency", paths["adjacency"],
                       "--model", "affine-rs", "--exposure-transform", "log",
                       "--censor-threshold", "10", "--out", str(tmp_path)])
    hours = (time.perf_counter() - t0) / 3600
    fit = json.loads((tmp_path / "fit.json").read_text()) if rc == 0 else {}
    rr = fit.get("relative_rate", {})
    ok = rc == 0 and fit.get("n", 0) >= 3000 and "relative_rate" in rr and hours < 3
    report(9, ok, f"exit {rc}, n={fit.get('n')}, exp(beta_z)={rr.get('relative_rate', float('nan')):.4f} "
                  f"({rr.get('lower', float('nan')):.4f}, {rr.get('upper', float('nan')):.4f}), "
                  f"{hours * 60:.1f} min (<180)")
