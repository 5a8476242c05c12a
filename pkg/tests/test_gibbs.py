import json
import math
import warnings

import numpy as np
import pytest
from scipy import optimize, stats

from conftest import gaussian_gm2
from spatial_affine.gibbs import (ChainConfig, ConfigError, ModelConfig, PriorConfig,
                                  SamplerError, batch_means_se, paerc_summary, run_chain,
                                  truncated_poisson_pmf)
from spatial_affine.graph import ring
from spatial_affine.linear_estimators import (Dataset, SplineSpec, VarianceParams,
                                              affine_fit_reml)
from spatial_affine.simgen import gm_catalog, generate_dataset


def test_config_validation():
    with pytest.raises(ConfigError):
        ChainConfig(iterations=100, burn_in=100)
    with pytest.raises(ConfigError):
        ChainConfig(thin=0)
    with pytest.raises(ConfigError):
        ModelConfig(outcome_family="binomial")
    with pytest.raises(ConfigError):
        ModelConfig(estimator="car")
    with pytest.raises(ConfigError):
        PriorConfig(tau_shape=None)
    with pytest.raises(ConfigError):
        PriorConfig(psi_shape=0.0)
    assert ChainConfig(1100, 100, thin=4).n_retained == 250


def test_config_round_trip():
    cfg = ModelConfig("gaussian", "affine", spline=SplineSpec(3, (0.1, 0.5)),
                      priors=PriorConfig.flat(beta_sd=math.inf),
                      chain=ChainConfig(500, 100, seed=3),
                      fixed_variance=VarianceParams(1, 0.5, 1, 0.2, 0.3, 2))
    d = json.loads(json.dumps(cfg.to_dict()))
    d["priors"]["beta_sd"] = math.inf
    assert ModelConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"estimator": "affine", "colour": 1})


def test_estimator_flags():
    assert not ModelConfig(estimator="nonspatial").has_u
    assert not ModelConfig(estimator="spatial").joint
    assert ModelConfig(estimator="spatial-rs").joint and not ModelConfig(estimator="spatial-rs").free_rho
    assert ModelConfig(estimator="affine-rs").restrict and ModelConfig(estimator="affine-rs").use_kappa
    assert not ModelConfig(estimator="affine", priors=PriorConfig(use_kappa=False)).use_kappa


def test_truncated_poisson_pmf_matches_scipy():
    mu = np.array([0.3, 4.0, 9.5, 40.0])
    pmf = truncated_poisson_pmf(mu, 10)
    k = np.arange(10)
    for i, m in enumerate(mu):
        ref = stats.poisson.pmf(k, m)
        assert np.allclose(pmf[i], ref / ref.sum(), rtol=1e-10, atol=1e-300)


def joint_gls(vp, data, graph):
    """Mean and covariance of (beta, gamma) under flat priors with the variance fixed."""
    n = data.n
    A = graph.adjacency.toarray()
    D = np.diag(A.sum(1))
    G = vp.tau_u * (D - vp.phi_u * A)
    H = vp.tau_z * (D - vp.phi_z * A)
    Q = -vp.rho * math.sqrt(vp.tau_u * vp.tau_z) * D
    S = np.linalg.inv(np.block([[G, Q], [Q, H]]))
    S[:n, :n] += np.eye(n) / vp.tau_eps
    X, Xe = data.design, data.x_minus_z
    C = np.block([[X, np.zeros((n, Xe.shape[1]))], [np.zeros((n, X.shape[1])), Xe]])
    Si = np.linalg.inv(S)
    cov = np.linalg.inv(C.T @ Si @ C)
    return cov @ C.T @ Si @ np.concatenate([data.y, data.z]), cov


def test_fixed_variance_gaussian_posterior_is_joint_gls():
    data, g = gaussian_gm2(60, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = affine_fit_reml(data, g, n_starts=2)
    mean, cov = joint_gls(fit.variance_params, data, g)
    cfg = ModelConfig("gaussian", "affine", priors=PriorConfig.flat(beta_sd=math.inf),
                      chain=ChainConfig(6000, 500, seed=1), fixed_variance=fit.variance_params)
    s = run_chain(cfg, data, g, initial=fit.variance_params)
    draws = np.hstack([s.beta, s.gamma])
    for j in range(draws.shape[1]):
        assert abs(draws[:, j].mean() - mean[j]) < 4 * batch_means_se(draws[:, j])
        assert draws[:, j].std() == pytest.approx(math.sqrt(cov[j, j]), rel=0.1)
    # the REML point estimate is the same GLS solution
    assert mean[0] == pytest.approx(fit.beta[0], abs=1e-8)


def test_prior_sampling_recovers_gamma_and_uniform():
    data, g = gaussian_gm2(40, 0)
    cfg = ModelConfig("gaussian", "spatial", chain=ChainConfig(42000, 2000, thin=20, seed=5),
                      sample_prior=True)
    s = run_chain(cfg, data, g)
    tau = s.variance["tau_u"]
    phi = s.variance["phi_u"]
    assert stats.kstest(tau, stats.gamma(5.0, scale=1 / 5.0).cdf).pvalue > 0.001
    assert stats.kstest(phi, stats.uniform(-1, 2).cdf).pvalue > 0.001


def test_prior_sampling_respects_support_of_joint_model():
    data, g = gaussian_gm2(40, 0)
    cfg = ModelConfig("gaussian", "affine-rs", chain=ChainConfig(6000, 1000, seed=2),
                      sample_prior=True)
    s = run_chain(cfg, data, g)
    v = s.variance
    assert np.all(v["phi_z"] <= v["phi_u"])
    lam = np.cos(2 * np.pi * np.arange(40) / 40)
    m = (1 - np.outer(v["phi_u"], lam)) * (1 - np.outer(v["phi_z"], lam)) - v["rho"][:, None] ** 2
    assert m.min() > 0


def _poisson_data(n=200, seed=0, censor=None):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    z = rng.standard_normal(n)
    y = rng.poisson(np.exp(1.5 + 0.4 * z - 0.3 * x)).astype(float)
    mask = None
    if censor is not None:
        mask = y < censor
        y = np.where(mask, 0.0, y)
    return Dataset(y=y, z=z, x_minus_z=np.column_stack([np.ones(n), x]), offset=np.zeros(n),
                   censor_mask=mask, censor_threshold=censor)


def test_nonspatial_poisson_posterior_near_mle():
    data = _poisson_data()
    X = data.design

    def nll(b):
        eta = X @ b
        return float(np.exp(eta).sum() - data.y @ eta)

    mle = optimize.minimize(nll, np.zeros(3), method="BFGS").x
    cfg = ModelConfig("poisson", "nonspatial", priors=PriorConfig.flat(beta_sd=math.inf),
                      chain=ChainConfig(4000, 500, seed=0))
    s = run_chain(cfg, data, ring(200))
    assert np.allclose(s.beta.mean(axis=0), mle, atol=0.03)
    assert s.acceptance["beta"] > 0.3


def test_censored_counts_imputed_below_threshold():
    data = _poisson_data(150, 1, censor=3)
    assert data.censor_mask.sum() > 0
    cfg = ModelConfig("poisson", "spatial", chain=ChainConfig(1500, 500, seed=0), debug=True)
    s = run_chain(cfg, data, ring(150))
    assert s.imputed.shape == (1000, data.censor_mask.sum())
    assert s.imputed.min() >= 0 and s.imputed.max() <= 2
    assert len(np.unique(s.imputed)) > 1


@pytest.mark.parametrize("estimator", ["spatial-rs", "affine", "affine-rs"])
def test_debug_constraints_hold_in_joint_chains(estimator):
    cfg = gm_catalog(80)[1]
    data, _ = generate_dataset(cfg, 2)
    mc = ModelConfig("poisson", estimator, chain=ChainConfig(600, 200, seed=1), debug=True)
    s = run_chain(mc, data, cfg.get_graph())
    if estimator.endswith("-rs"):
        assert np.all(s.variance["phi_z"] <= s.variance["phi_u"])
    if estimator == "spatial-rs":
        assert "rho" not in s.variance


def test_infeasible_initial_values_rejected():
    data, g = gaussian_gm2(30, 0)
    cfg = ModelConfig("gaussian", "affine", chain=ChainConfig(20, 10))
    with pytest.raises(SamplerError):
        run_chain(cfg, data, g, initial=VarianceParams(1, 0.95, 1, 0.95, 0.9, 1))


def test_same_seed_same_draws():
    data, g = gaussian_gm2(30, 0)
    cfg = ModelConfig("gaussian", "affine-rs", chain=ChainConfig(300, 100, seed=9))
    a, b = run_chain(cfg, data, g), run_chain(cfg, data, g)
    assert np.array_equal(a.beta, b.beta)


def test_paerc_summary_and_outputs(tmp_path):
    data = _poisson_data(100, 2)
    cfg = ModelConfig("poisson", "spatial", chain=ChainConfig(800, 200, seed=0))
    s = run_chain(cfg, data, ring(100))
    r = paerc_summary(s, "coefficient", level=0.9)
    lo, hi = np.quantile(s.beta_z, [0.05, 0.95])
    assert r["relative_rate"] == pytest.approx(np.exp(s.beta_z.mean()))
    assert (r["lower"], r["upper"]) == pytest.approx((np.exp(lo), np.exp(hi)))
    with pytest.raises(ValueError):
        paerc_summary(s, "curve-grid", grid=[0.0])
    s.to_csv(tmp_path / "s.csv")
    s.to_json(tmp_path / "s.json")
    head = (tmp_path / "s.csv").read_text().splitlines()
    assert head[0].split(",")[:3] == ["iteration", "z", "intercept"]
    assert len(head) == s.n_draws + 1
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["relative_rate"]["relative_rate"] == pytest.approx(r["relative_rate"])


def test_curve_grid_summary():
    data, g = gaussian_gm2(60, 1)
    cfg = ModelConfig("gaussian", "spatial", spline=SplineSpec(3),
                      chain=ChainConfig(600, 200, seed=0))
    s = run_chain(cfg, data, g)
    grid = np.linspace(-1, 1, 5)
    r = paerc_summary(s, "curve-grid", grid=grid)
    assert r["log_mean"][2] == pytest.approx(0.0, abs=1e-12)
    assert np.all(r["lower"] <= r["upper"])
    with pytest.raises(KeyError):
        s.beta_z


def test_batch_means_se_iid():
    x = np.random.default_rng(0).standard_normal(100_000)
    assert batch_means_se(x) == pytest.approx(1 / math.sqrt(1e5), rel=0.3)


def test_rho_zero_fixed_variance_posterior_is_gls():
    from spatial_affine.linear_estimators import gls_estimate
    data, g = gaussian_gm2(60, 7)
    vp = VarianceParams(1.0, 0.5, 1.0, 0.2, 0.0, 2.0)
    A = g.adjacency.toarray()
    D = np.diag(A.sum(1))
    V = np.linalg.inv(vp.tau_u * (D - vp.phi_u * A)) + np.eye(60) / vp.tau_eps
    beta, cov = gls_estimate(data.design, data.y, V)
    cfg = ModelConfig("gaussian", "spatial", priors=PriorConfig.flat(beta_sd=math.inf),
                      chain=ChainConfig(6000, 500, seed=2), fixed_variance=vp)
    s = run_chain(cfg, data, g, initial=vp)
    for j in range(len(beta)):
        assert abs(s.beta[:, j].mean() - beta[j]) < 3 * batch_means_se(s.beta[:, j])
        assert s.beta[:, j].std() == pytest.approx(math.sqrt(cov[j, j]), rel=0.1)


def test_poisson_needs_offset():
    d = _poisson_data(30)
    bare = Dataset(y=d.y, z=d.z, x_minus_z=d.x_minus_z)
    with pytest.raises(ConfigError):
        run_chain(ModelConfig("poisson", "spatial", chain=ChainConfig(20, 10)), bare, ring(30))


def test_all_zero_counts_stress_case():
    n = 60
    rng = np.random.default_rng(0)
    data = Dataset(y=np.zeros(n), z=rng.standard_normal(n),
                   x_minus_z=np.ones((n, 1)), offset=np.zeros(n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        s = run_chain(ModelConfig("poisson", "affine-rs", chain=ChainConfig(1500, 500, seed=0)),
                      data, ring(n))
    assert np.all(np.isfinite(s.beta))
    assert s.column("intercept").mean() < -3


def test_variance_acceptance_band_on_gm2():
    cfg = gm_catalog(300)[1]
    data, _ = generate_dataset(cfg, 0)
    mc = ModelConfig("poisson", "affine-rs", priors=PriorConfig.flat(),
                     chain=ChainConfig(3000, 1000, seed=0))
    s = run_chain(mc, data, cfg.get_graph())
    for name in ("tau_u", "phi_u", "tau_z", "phi_z", "rho"):
        assert 0.1 <= s.acceptance[name] <= 0.6, (name, s.acceptance[name])


@pytest.mark.parametrize("graph_kind, expected_n", [("ring", 4), ("grid", 16)])
def test_auto_surrogate_and_kappa_oracle(graph_kind, expected_n):
    from spatial_affine.gibbs import _build_context, _surrogate_kappa
    from spatial_affine.graph import grid
    g = ring(36) if graph_kind == "ring" else grid(6, 6)
    rng = np.random.default_rng(0)
    data = Dataset(y=rng.standard_normal(36), z=rng.standard_normal(36),
                   x_minus_z=np.ones((36, 1)))
    ctx = _build_context(ModelConfig("gaussian", "affine"), data, g)
    sg = ctx.surrogate.graph
    assert sg.n == expected_n
    p = dict(tau_u=1.3, phi_u=0.6, tau_z=0.7, phi_z=-0.2, rho=0.4)
    A = sg.adjacency.toarray()
    D = np.diag(A.sum(1))
    q = -p["rho"] * math.sqrt(p["tau_u"] * p["tau_z"]) * D
    ev = np.linalg.eigvalsh(np.block([[p["tau_u"] * (D - p["phi_u"] * A), q],
                                      [q, p["tau_z"] * (D - p["phi_z"] * A)]]))
    assert _surrogate_kappa(ctx, p) == pytest.approx(ev[-1] / ev[0], rel=1e-10)
