import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from plomctl.diagnostics import batch_means_stderr, eps_d, f_d, g_bar
from plomctl.diffusion_maps import build_kernel, reduce, solve_basis
from plomctl.errors import ConfigError
from plomctl.isde_sampler import IsdeConfig, generate
from plomctl.kde import KdeModel, fit_kde
from plomctl.mixture_oracle import (
    MultiIndexEnumeration,
    closed_form_moments,
    enumerate_mixture,
    exact_dsq,
    exact_g_bar,
    exact_r,
    h_d,
    mixture_log_pdf,
    r_hypothesis_report,
    sample_mixture,
    verify_sum_identities,
    z_moments,
)
from plomctl.pca import NormalizedMatrix
from tests.helpers import basis_for, three_points, two_points, whitened


def test_enumeration_order():
    """
    Test N^N multi-indices in odometer order with the identity index.
    """
    enumeration = MultiIndexEnumeration(3)

    indices = list(enumeration)

    assert len(enumeration) == len(indices) == 27
    assert indices[:4] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0)]
    assert indices[enumeration.identity_index] == (0, 1, 2)
    assert len(set(indices)) == 27


def test_enumeration_caps(caplog):
    """
    Test the default cap, the hard cap and the warning above the default.
    """
    with pytest.raises(ConfigError):
        MultiIndexEnumeration(7)
    with pytest.raises(ConfigError):
        MultiIndexEnumeration(3, cap=9)

    with caplog.at_level(logging.WARNING):
        enumeration = MultiIndexEnumeration(7, cap=8)

    assert enumeration.size == 7**7
    assert "823543" in caplog.text


def test_uniform_weights_at_full_order():
    """
    Test p_j = 1/N^N exactly when m = N.
    """
    eta = three_points()
    mixture = enumerate_mixture(eta, basis_for(eta), 3)

    assert np.all(mixture.weights == 1.0 / 27)
    assert np.all(mixture.a_vals == 0.0)


def test_weights_are_normalized():
    """
    Test normalization, a_j >= 0 and 0 < gamma_j <= 1 at m = 2.
    """
    eta = three_points()
    mixture = enumerate_mixture(eta, basis_for(eta), 2)

    assert mixture.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(mixture.a_vals >= -1e-14)
    assert np.all((mixture.gamma > 0) & (mixture.gamma <= 1.0))
    # the identity index is the data itself, a_j = eta_d (I - G) eta_d^T
    identity = mixture.enumeration.identity_index
    assert mixture.a_vals[identity] == pytest.approx(eps_d(eta, basis_for(eta), 2) ** 2 * eta.norm_sq, abs=1e-12)


def test_two_point_a_values():
    """
    Test a_j at N = 2, m = 1 against the hand computation.
    """
    eta = two_points()
    mixture = enumerate_mixture(eta, basis_for(eta), 1)

    np.testing.assert_allclose(mixture.a_vals, [0.0, 1.0, 1.0, 0.0], atol=1e-12)


def test_single_kernel_log_pdf():
    """
    Test the N = 1 mixture against the Gaussian density.
    """
    # Arrange
    eta = NormalizedMatrix([[0.3]])
    kde = KdeModel(1.0, 0.5, eta.eta_d)
    basis = reduce(solve_basis(build_kernel(eta, 1.0)), 1)
    mixture = enumerate_mixture(eta, basis, 1, kde=kde)
    z = np.array([[0.8]])

    # Act
    value = mixture_log_pdf(mixture, z)

    # Assert
    mean = 0.5 * 0.3 * basis.a[0, 0]
    scale = 0.5 * abs(basis.a[0, 0])
    assert value == pytest.approx(norm.logpdf(0.8, mean, scale), rel=1e-12)


def test_mixture_density_integrates_to_one():
    """
    Test that the density of [Z_1] at N = 2 has unit mass.
    """
    eta = two_points()
    mixture = enumerate_mixture(eta, basis_for(eta), 1)

    mass, _ = integrate.quad(lambda t: np.exp(mixture_log_pdf(mixture, [[t]])), -np.inf, np.inf, epsabs=1e-12)

    assert mass == pytest.approx(1.0, abs=1e-6)


def test_mixture_density_is_symmetric():
    """
    Test p(z) = p(-z) for the symmetric dataset.
    """
    rng = np.random.default_rng(51)
    eta = three_points()
    mixture = enumerate_mixture(eta, basis_for(eta), 2)

    for _ in range(10):
        z = rng.standard_normal((1, 2))
        assert mixture_log_pdf(mixture, z) == pytest.approx(mixture_log_pdf(mixture, -z), abs=1e-10)


def test_closed_form_moments_full_order():
    """
    Test E[H_N] = 0 and E|H_N|^2 = nu N.
    """
    eta = whitened(2, 4, seed=52)

    mean, second = closed_form_moments(eta, basis_for(eta), 4)

    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    assert second == pytest.approx(8.0, rel=1e-8)


def test_moments_agree_between_routes():
    """
    Test that the lifted mixture moments equal the closed forms.
    """
    # Arrange
    eta = three_points()
    reduced = basis_for(eta, m=2)
    mixture = enumerate_mixture(eta, reduced, 2)

    # Act
    z_mean, _ = z_moments(mixture)
    mean, _ = closed_form_moments(eta, reduced, 2, mixture)

    # Assert
    np.testing.assert_allclose(z_mean @ reduced.g.T, mean, atol=1e-12)


def test_closed_form_moments_match_direct_sampling():
    """
    Test E|H_2|^2 against 10^6 direct mixture draws.
    """
    # Arrange
    eta = three_points()
    reduced = basis_for(eta, m=2)
    mixture = enumerate_mixture(eta, reduced, 2)

    # Act
    z = sample_mixture(mixture, 1_000_000, np.random.default_rng(53))
    norms = np.sum((z @ reduced.g.T) ** 2, axis=(1, 2))
    _, second = closed_form_moments(eta, reduced, 2, mixture)

    # Assert
    assert abs(norms.mean() - second) <= 3 * norms.std(ddof=1) / np.sqrt(norms.size)


def test_exact_dsq_full_order():
    """
    Test d^2(N) = 1 + N/(N-1).
    """
    assert exact_dsq(three_points(), basis_for(three_points()), 3) == pytest.approx(2.5, abs=1e-10)
    eta = whitened(1, 4, seed=54)
    assert exact_dsq(eta, basis_for(eta), 4) == pytest.approx(1.0 + 4.0 / 3.0, abs=1e-10)


def test_exact_dsq_decomposition():
    """
    Test d^2 = f_d + h_d and agreement with the moment route at m = 2.
    """
    # Arrange
    eta = three_points()
    reduced = basis_for(eta, m=2)
    mixture = enumerate_mixture(eta, reduced, 2)

    # Act
    dsq = exact_dsq(eta, reduced, 2, mixture)
    mean, second = closed_form_moments(eta, reduced, 2, mixture)

    # Assert
    from_moments = (second - 2 * np.sum(mean * eta.eta_d) + eta.norm_sq) / eta.norm_sq
    assert dsq == pytest.approx(from_moments, abs=1e-10)
    fd = f_d(3, 1, eps_d(eta, reduced, 2), 2)
    assert dsq == pytest.approx(fd + h_d(eta, reduced, 2, mixture), abs=1e-10)


def test_exact_g_bar_matches_closed_form():
    """
    Test the enumerated g_bar against 1 + (s_hat/s)^2 m/N - eps_d^2.
    """
    eta = whitened(2, 4, seed=55)
    basis = basis_for(eta)

    for m in range(1, 5):
        expected = g_bar(4, 2, eps_d(eta, basis, m), m)
        assert exact_g_bar(eta, basis, m) == pytest.approx(expected, abs=1e-10)


def test_r_hypothesis_report():
    """
    Test r(N) = 1, r(m) >= 0 and that violations are exactly the r > 1 orders.
    """
    eta = whitened(1, 4, seed=56)
    basis = basis_for(eta)

    report = r_hypothesis_report(eta, basis, m_opt=2)

    assert report.m_values.tolist() == [1, 2, 3, 4]
    assert report.r[-1] == 1.0
    assert np.all(report.r >= 0)
    assert report.violations == [m for m, r in zip([1, 2, 3, 4], report.r) if m >= 2 and r > 1.0]
    assert report.holds == (not report.violations)
    assert exact_r(eta, basis, 3) == pytest.approx(report.r[2])


@pytest.mark.parametrize(
    "eta,tolerance",
    [(two_points(), 1e-12), (whitened(2, 3, seed=57), 1e-10), (whitened(1, 4, seed=58), 1e-10)],
)
def test_sum_identities(eta, tolerance):
    """
    Test the uniform averages over all multi-indices.
    """
    report = verify_sum_identities(eta)

    assert report.max_residual <= tolerance * max(1.0, eta.norm_sq)


@pytest.mark.slow
def test_sampler_agrees_with_mixture():
    """
    Test the ISDE sampler against the exact reduced measure at nu = 1, N = 3, m = 2.
    """
    # Arrange
    eta = three_points()
    kde = fit_kde(eta)
    basis = basis_for(eta)
    reduced = reduce(basis, 2)
    mixture = enumerate_mixture(eta, reduced, 2, kde=kde)
    config = IsdeConfig(n_mc=100_000, seed=4, dr=0.03, burn_in_steps=500, spacing_steps=30, n_chains=20)

    # Act
    learned = generate(eta, kde, basis, 2, config)
    z = learned.z_samples
    exact_mean, exact_second = z_moments(mixture)
    norms = np.sum(z**2, axis=(1, 2))
    h_mean, _ = closed_form_moments(eta, reduced, 2, mixture)
    h = learned.eta_samples

    # Assert
    assert abs(norms.mean() - exact_second) <= 3 * batch_means_stderr(norms)
    for k in range(2):
        assert abs(z[:, 0, k].mean() - exact_mean[0, k]) <= 3 * batch_means_stderr(z[:, 0, k])
    for j in range(3):
        assert abs(h[:, 0, j].mean() - h_mean[0, j]) <= 3 * batch_means_stderr(h[:, 0, j])


@pytest.mark.slow
@pytest.mark.parametrize("m", [2, 3, 4])
def test_sampler_second_moment_in_two_dimensions(m):
    """
    Test E|H_m|^2 and E[H_m] from the sampler against the exact reduced measure at nu = 2, N = 4.
    """
    # Arrange
    eta = whitened(2, 4, seed=67)
    kde = fit_kde(eta)
    basis = basis_for(eta)
    reduced = reduce(basis, m)
    mixture = enumerate_mixture(eta, reduced, m, kde=kde)
    config = IsdeConfig(n_mc=40_000, seed=6, dr=0.03, burn_in_steps=500, spacing_steps=30, n_chains=20)

    # Act
    h = generate(eta, kde, basis, m, config).eta_samples
    exact_mean, exact_second = closed_form_moments(eta, reduced, m, mixture)
    norms = np.sum(h**2, axis=(1, 2))

    # Assert
    assert abs(norms.mean() - exact_second) <= 3 * batch_means_stderr(norms)
    for k in range(2):
        assert abs(h[:, k, 0].mean() - exact_mean[k, 0]) <= 3 * batch_means_stderr(h[:, k, 0])


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    nu=st.integers(min_value=1, max_value=2),
    N=st.integers(min_value=3, max_value=4),
)
def test_sum_identities_on_random_data(seed, nu, N):
    """
    Test the uniform averages over all multi-indices for random whitened data.
    """
    eta = whitened(nu, N, seed=seed)

    report = verify_sum_identities(eta)

    assert report.max_residual <= 1e-10 * max(1.0, eta.norm_sq)
