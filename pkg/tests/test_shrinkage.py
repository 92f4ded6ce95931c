import math

import numpy as np
import pytest
import scipy.integrate
import scipy.optimize
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from smlmc import shrinkage as shr
from smlmc.errors import DomainError

from conftest import random_kernel


def numeric_mode(logpdf, lo=-30.0, hi=30.0):
    """Argmax over log-space by bounded scalar search (Jacobian excluded)."""
    res = scipy.optimize.minimize_scalar(lambda u: -logpdf(math.exp(u)), bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12})  # fmt: skip
    return math.exp(res.x)


def gamma_mean_by_quadrature(shape, rate):
    f = lambda x: x * scipy.stats.gamma.pdf(x, shape, scale=1 / rate)
    return scipy.integrate.quad(f, 0, np.inf, epsabs=1e-13, epsrel=1e-12)[0]


cfg = shr.PriorConfig()


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 20))
def test_psi_update_is_conditional_mode(a, delta):
    logpdf = lambda p: -0.5 * math.log(p) - a * a / (2 * p) + (cfg.alpha - 1) * math.log(p) - delta * p
    got = float(shr.update_psi(a, delta, cfg))
    if got > 1e-8:
        assert got == pytest.approx(numeric_mode(logpdf), rel=1e-6)


def test_delta_update_is_conditional_mean():
    psi, phi = 0.7, 1.9
    assert float(shr.update_delta(psi, phi, cfg)) == pytest.approx(gamma_mean_by_quadrature(cfg.alpha + cfg.beta, psi + phi), rel=1e-9)


def test_phi_update_is_conditional_mode():
    D, dsum, tau = 5, 3.2, 0.4
    logpdf = lambda p: (D * cfg.beta + cfg.gamma - 1) * math.log(p) - (dsum + tau) * p
    assert float(shr.update_phi(dsum, tau, D, cfg)) == pytest.approx(numeric_mode(logpdf), rel=1e-6)


def test_tau_update_is_conditional_mean():
    phi = 0.35
    assert float(shr.update_tau(phi, cfg)) == pytest.approx(gamma_mean_by_quadrature(cfg.gamma + cfg.d, phi + cfg.eta), rel=1e-9)


def test_prior_config_validates():
    with pytest.raises(DomainError):
        shr.PriorConfig(eta=0.0)
    with pytest.raises(DomainError):
        shr.PriorConfig(alpha=-1.0)


def test_invalid_state_rejected(rng):
    k = random_kernel(rng)
    state = shr.init_state(k)
    state.psi[0][0, 0] = 0.0
    with pytest.raises(DomainError):
        shr.log_prior(k, state, cfg)


def test_prior_gradient_matches_finite_differences(rng):
    k = random_kernel(rng, Q=2, D=3, R=2)
    state = shr.closed_form_update(k, shr.init_state(k), cfg)
    theta = k.to_vector()
    g = shr.log_prior_grad(k, state, cfg)
    s = k.block_slices()
    for j in list(range(theta.size))[s["A"]] + list(range(theta.size))[s["lam"]]:
        h = 1e-6
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (shr.log_prior(k.with_vector(tp), state, cfg) - shr.log_prior(k.with_vector(tm), state, cfg)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-7)


def test_sweep_never_lowers_collapsed_prior(rng):
    k = random_kernel(rng, Q=2, D=4, R=3)
    state = shr.init_state(k)
    state = shr.closed_form_update(k, state, cfg)
    prev = shr.collapsed_log_prior(k, state, cfg)
    for _ in range(20):
        state = shr.closed_form_update(k, state, cfg)
        cur = shr.collapsed_log_prior(k, state, cfg)
        assert cur >= prev - 1e-9
        prev = cur


@pytest.mark.parametrize("nu", [0.1, 1.0, 10.0])
def test_tpb_normalized(nu):
    assert shr.tpb_mass(0.5, 0.5, nu) == pytest.approx(1.0, abs=1e-8)


def test_tpb_reduces_to_beta_at_unit_nu():
    rho = np.linspace(0.01, 0.99, 9)
    np.testing.assert_allclose(shr.tpb_density(rho, 1.5, 2.5, 1.0), scipy.stats.beta.pdf(rho, 2.5, 1.5), rtol=1e-12)


def test_tpb_cdf_matches_quadrature():
    f = lambda r: float(shr.tpb_density(r, 0.5, 0.5, 3.0))
    for r in (0.05, 0.3, 0.8):
        assert float(shr.tpb_cdf(r, 0.5, 0.5, 3.0)) == pytest.approx(scipy.integrate.quad(f, 0, r, limit=200)[0], abs=1e-6)


def test_tpb_density_domain():
    with pytest.raises(DomainError):
        shr.tpb_density(1.0, 0.5, 0.5, 1.0)


@pytest.mark.parametrize("alpha,beta,nu", [(0.5, 1.5, 2.0), (1.5, 0.5, 0.3)])
def test_shrinkage_coefficient_follows_tpb(alpha, beta, nu):
    _, psi = shr.sample_two_layer(alpha, beta, nu, 20000, seed=7, return_psi=True)
    ks = scipy.stats.kstest(1.0 / (1.0 + psi), lambda r: shr.tpb_cdf(r, alpha, beta, nu))
    assert ks.statistic < 0.015


def test_sampler_is_seeded():
    np.testing.assert_array_equal(shr.sample_two_layer(0.5, 0.5, 1.0, 10, seed=3), shr.sample_two_layer(0.5, 0.5, 1.0, 10, seed=3))
