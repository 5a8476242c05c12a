import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatial_affine.graph import CarParams, ring
from spatial_affine.identifiability import (RingParams, car_ring_determinant,
                                            car_ring_determinant_recurrence,
                                            identification_report, lag_profile,
                                            limit_prec_z_entry, limit_var_y_given_z_entry,
                                            moments_from_samples, nonspatial_closed_form,
                                            nonspatial_flatness_check, nonspatial_maximize,
                                            population_moments, ring_inverse_limit_entry,
                                            stdc_determinant)
from spatial_affine.linear_estimators import Dataset


def ring_matrix(n, phi):
    A = 2.0 * np.eye(n)
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = -phi
    return A


def tridiag(n, phi):
    return 2.0 * np.eye(n) - phi * (np.eye(n, k=1) + np.eye(n, k=-1))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.floats(-0.99, 0.99))
def test_ring_determinant_closed_form_and_recurrence(n, phi):
    dense = np.linalg.det(ring_matrix(n, phi))
    assert car_ring_determinant(n, phi) == pytest.approx(dense, rel=1e-8, abs=1e-9)
    assert car_ring_determinant_recurrence(n, phi) == pytest.approx(dense, rel=1e-8, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.floats(-0.99, 0.99))
def test_tridiagonal_determinant(n, phi):
    assert stdc_determinant(n, phi) == pytest.approx(np.linalg.det(tridiag(n, phi)), rel=1e-9)


def test_determinant_domain_errors():
    assert stdc_determinant(0, 0.3) == 1.0
    with pytest.raises(ValueError):
        stdc_determinant(-1, 0.3)
    with pytest.raises(ValueError):
        car_ring_determinant(2, 0.3)


@pytest.mark.parametrize("phi", [-0.8, 0.0, 0.5, 0.9])
def test_inverse_limit_matches_large_ring(phi):
    inv = np.linalg.inv(ring_matrix(400, phi))
    for lag in range(6):
        assert ring_inverse_limit_entry(lag, phi) == pytest.approx(inv[0, lag], abs=1e-12)


def test_limits_match_dense_moments_and_converge_monotonically():
    p = RingParams(300, 1.2, 0.6, 0.8, 0.3, 0.4)
    mom = population_moments(p)
    for lag in range(5):
        assert limit_prec_z_entry(lag, p) == pytest.approx(mom.prec_z[0, lag], abs=1e-10)
        if lag:
            assert limit_var_y_given_z_entry(lag, p) == pytest.approx(
                mom.var_y_given_z[0, lag], abs=1e-10)
    gaps = [abs(population_moments(RingParams(n, 1.2, 0.6, 0.8, 0.3, 0.4)).prec_z[0, 2]
                - limit_prec_z_entry(2, p)) for n in (8, 12, 16, 24, 32)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_population_moments_against_joint_covariance():
    p = RingParams(20, 1.5, 0.4, 0.7, -0.3, 0.5, tau_eps=3.0, beta_z=0.8)
    mom = population_moments(p)
    n = p.n
    G = p.tau_u * ring_matrix(n, p.phi_u)
    H = p.tau_z * ring_matrix(n, p.phi_z)
    Q = -p.rho * math.sqrt(p.tau_u * p.tau_z) * 2 * np.eye(n)
    S = np.linalg.inv(np.block([[G, Q], [Q, H]]))
    Suu, Suz, Szz = S[:n, :n], S[:n, n:], S[n:, n:]
    # Y = beta Z + U + eps
    Syz = p.beta_z * Szz + Suz
    Syy = p.beta_z ** 2 * Szz + 2 * p.beta_z * Suz + Suu + np.eye(n) / p.tau_eps
    Syy = 0.5 * (Syy + Syy.T)
    M = Syz @ np.linalg.inv(Szz)
    assert np.allclose(mom.prec_z, np.linalg.inv(Szz), atol=1e-10)
    assert np.allclose(mom.mean_operator, M, atol=1e-10)
    assert np.allclose(mom.var_y_given_z, Syy - M @ Syz.T, atol=1e-10)


@pytest.mark.parametrize("params", [RingParams(60), RingParams(60, 2.0, -0.4, 0.5, 0.7, -0.5, 4.0, -1.0),
                                    RingParams(60, rho=0.0)])
def test_recovery_from_population_moments(params):
    rep = identification_report(params)
    assert rep.verdict == "identifiable"
    assert rep.within(1e-6), rep.errors
    assert set(rep.errors) == {"phi_u", "phi_z", "tau_z", "rho", "beta_z", "tau_u", "tau_eps"}
    assert rep.decay_class == ("rho*phi_u = 0" if params.rho == 0 else "rho*phi_u != 0")


def test_confounder_without_dependence_is_not_identified():
    rep = identification_report(RingParams(40, phi_u=0.0))
    assert rep.verdict == "non-identifiable"
    assert rep.decay_class == "rho*phi_u = 0"
    assert "tau_u" not in rep.recovered
    d = rep.to_dict()
    assert d["decay_class"] == "rho*phi_u = 0" and d["verdict"] == "non-identifiable"


def test_recovery_from_sampled_moments():
    p = RingParams(12, 1.0, 0.6, 1.0, 0.2, 0.5)
    mom = population_moments(p)
    rng = np.random.default_rng(0)
    m = 200_000
    Lz = np.linalg.cholesky(np.linalg.inv(mom.prec_z))
    Lv = np.linalg.cholesky(mom.var_y_given_z)
    z = rng.standard_normal((m, p.n)) @ Lz.T
    y = z @ mom.mean_operator.T + rng.standard_normal((m, p.n)) @ Lv.T
    est = moments_from_samples(y, z)
    assert np.allclose(est.prec_z, mom.prec_z, atol=0.05)
    rep = identification_report(p, moments=est, tol=1e-3)
    assert rep.verdict == "identifiable"
    assert abs(rep.errors["phi_u"]) < 0.1 and abs(rep.errors["beta_z"]) < 0.05


def test_lag_profile():
    A = ring_matrix(10, 0.4)
    assert np.allclose(lag_profile(A, 3), [2.0, -0.4, 0.0, 0.0])


def test_ring_params_validation():
    with pytest.raises(ValueError):
        RingParams(2)
    with pytest.raises(ValueError):
        RingParams(10, rho=1.0)
    with pytest.raises(ValueError):
        RingParams(10, tau_u=0.0)


def _nonspatial_data(n=80, seed=3):
    rng = np.random.default_rng(seed)
    X = np.ones((n, 1))
    z = rng.standard_normal(n)
    return Dataset(y=0.5 + z + rng.standard_normal(n), z=z, x_minus_z=X)


def test_likelihood_flat_along_nonidentified_curve():
    assert nonspatial_flatness_check(_nonspatial_data(), curve_points=60) < 1e-8


def test_nonspatial_closed_form_is_the_maximizer():
    data = _nonspatial_data()
    s2, phi = nonspatial_closed_form(data)
    s2n, phin = nonspatial_maximize(data)
    assert s2n == pytest.approx(s2, rel=1e-5)
    assert phin == pytest.approx(phi, rel=1e-5)


def test_likelihood_not_flat_off_the_curve():
    from spatial_affine.identifiability import _nonspatial_params
    from spatial_affine.linear_estimators import restricted_log_likelihood
    data = _nonspatial_data()
    s2, phi = nonspatial_closed_form(data)
    g = ring(data.n)
    at = restricted_log_likelihood(_nonspatial_params(s2, phi, 2 / s2, 0.0, 2.0), data, g,
                                   exposure_covariates=False)
    off = restricted_log_likelihood(_nonspatial_params(1.1 * s2, phi, 2 / s2, 0.0, 2.0), data, g,
                                    exposure_covariates=False)
    assert at - off > 1e-2
