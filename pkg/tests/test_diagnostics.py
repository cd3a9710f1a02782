import math

import numpy as np
import pytest

from plomctl.dataset_io import apply_scaling, fit_scaling, load_table, save_table, synthetic_dataset
from plomctl.diagnostics import (
    ConcentrationCurves,
    batch_means_stderr,
    build_curves,
    concentration_report,
    d_app,
    d_maxent,
    d_sim,
    distances,
    entropy_ratio,
    eps_d,
    eps_d_curve,
    f_d,
    g_bar,
    log_gamma_c,
    select_m_by_fd,
)
from plomctl.diffusion_maps import default_eps_grid, reduce, select_eps_m
from plomctl.errors import InconsistencyError, ShapeError
from plomctl.isde_sampler import IsdeConfig, LearnedSet, generate
from plomctl.kde import bandwidths, fit_kde
from plomctl.pca import fit_pca, normalize
from tests.helpers import basis_for, low_rank_raw, whitened


@pytest.fixture(scope="module")
def problem():
    """
    nu = 3, N = 20 whitened data and its full basis.
    """
    eta = whitened(3, 20, seed=61)
    return eta, basis_for(eta, eps_dm=0.8)


def _replayed(eta, basis, m: int, count: int = 3) -> LearnedSet:
    """A learned set whose matrices all equal eta_d G_m."""
    reduced = reduce(basis, m)
    z = np.repeat((eta.eta_d @ reduced.a)[None], count, axis=0)
    config = IsdeConfig(n_mc=count, dr=0.1, burn_in_steps=0, spacing_steps=1)
    return LearnedSet(z, reduced.g, config, basis.eps_dm, basis.kappa)


def test_eps_d_endpoints_and_monotone(problem):
    """
    Test eps_d(1) = 1, eps_d(N) = 0 and monotone decrease.
    """
    eta, basis = problem

    curve = eps_d_curve(eta, basis)

    assert curve[0] == pytest.approx(1.0, abs=1e-10)
    assert curve[-1] == 0.0
    assert np.all(np.diff(curve) <= 1e-12)


@pytest.mark.parametrize("m", [2, 5, 11, 17])
def test_eps_d_matches_projection(problem, m):
    """
    Test eps_d(m) = |eta_d - eta_d G_m| / |eta_d|.
    """
    eta, basis = problem
    G = reduce(basis, m).G

    direct = np.linalg.norm(eta.eta_d - eta.eta_d @ G) / np.sqrt(eta.norm_sq)

    assert eps_d(eta, basis, m) == pytest.approx(direct, abs=1e-10)


def test_f_d_endpoints():
    """
    Test f_d(1) = 1 + s_hat^2/(N-1) and f_d(N) = N s_hat^2/(N-1).
    """
    _, s_hat = bandwidths(50, 4)

    assert f_d(50, 4, 1.0, 1) == pytest.approx(1 + s_hat**2 / 49)
    assert f_d(50, 4, 0.0, 50) == pytest.approx(50 * s_hat**2 / 49)


def test_f_d_reference_value():
    """
    Test f_d at N = 200, nu = 9, eps_d = 0.05, m = 10.
    """
    assert f_d(200, 9, 0.05, 10) == pytest.approx(0.016352, abs=1e-5)


def test_g_bar_values():
    """
    Test g_bar at both ends, the reference value and the positivity check.
    """
    s, s_hat = bandwidths(200, 9)

    assert g_bar(200, 9, 0.0, 200) == pytest.approx(1 + s_hat**2 / s**2)
    assert g_bar(200, 9, 1.0, 1) == pytest.approx((s_hat**2 / s**2) / 200)
    assert g_bar(200, 9, 0.05, 10) == pytest.approx(1.0339, abs=1e-4)
    with pytest.raises(InconsistencyError):
        g_bar(200, 9, 2.0, 1)


@pytest.mark.parametrize("N", [2, 3, 10, 57, 200, 1000, 10_000])
@pytest.mark.parametrize("nu", [1, 4, 9])
def test_full_order_consistency(N, nu):
    """
    Test nu s_hat^2 N + (s_hat/s)^2 nu (N - 1) = nu N.
    """
    s, s_hat = bandwidths(N, nu)

    assert nu * s_hat**2 * N + (s_hat / s) ** 2 * nu * (N - 1) == pytest.approx(nu * N, rel=1e-10)


def test_d_sim_of_replayed_data(problem):
    """
    Test that learned matrices equal to eta_d give zero distance.
    """
    eta, basis = problem

    mean, stderr = d_sim(_replayed(eta, basis, eta.N), eta)

    assert mean == pytest.approx(0.0, abs=1e-16)
    assert stderr == pytest.approx(0.0, abs=1e-16)


def test_d_sim_of_projected_data(problem):
    """
    Test that eta_d G_m lies at relative squared distance eps_d(m)^2.
    """
    eta, basis = problem

    values = distances(_replayed(eta, basis, 6), eta)

    np.testing.assert_allclose(values, eps_d(eta, basis, 6) ** 2, atol=1e-10)


def test_d_sim_shape_check(problem):
    """
    Test that learned sets of another size are refused.
    """
    eta, basis = problem
    other = whitened(3, 10, seed=62)

    with pytest.raises(ShapeError):
        d_sim(_replayed(other, basis_for(other), 10), eta)


def test_d_maxent_values():
    """
    Test 1 + m/(N-1) at reference points.
    """
    assert d_maxent(200, 10) == pytest.approx(1.05025, abs=1e-5)
    assert d_maxent(200, 200) == pytest.approx(2.00503, abs=1e-5)
    assert d_maxent(3, 3) == 2.5


def test_d_app_limits(problem):
    """
    Test d_app(N) = 1 + N/(N-1) and d_app = f_d where the exponential is flushed.
    """
    eta, basis = problem
    N, nu = eta.N, eta.nu

    assert d_app(N, nu, eta, basis, N) == pytest.approx(1 + N / (N - 1), abs=1e-12)
    first = eps_d(eta, basis, 1)
    s, _ = bandwidths(N, nu)
    assert first**2 * eta.norm_sq / (2 * s**2) > 37
    assert d_app(N, nu, eta, basis, 1) == pytest.approx(f_d(N, nu, first, 1), rel=1e-15)


def test_log_gamma_c():
    """
    Test log gamma_c at m = N, the reference value and monotone growth in m.
    """
    values = [log_gamma_c(200, 9, m) for m in (1, 10, 100, 200)]

    assert log_gamma_c(200, 9, 200) == 0.0
    assert log_gamma_c(200, 9, 10) == pytest.approx(-1101.8, rel=1e-3)
    assert values == sorted(values)


def test_entropy_ratio():
    """
    Test the MaxEnt to data entropy ratio at reference points.
    """
    assert round(entropy_ratio(200, 9), 1) == 2.4
    assert entropy_ratio(17, 2) == pytest.approx(1.0, rel=0.02)
    assert entropy_ratio(100, 1) == pytest.approx(0.3071, abs=1e-4)


def test_batch_means_stderr():
    """
    Test the iid fallback for short series and zero error for constants.
    """
    rng = np.random.default_rng(63)
    short = rng.standard_normal(50)

    assert batch_means_stderr(short) == pytest.approx(short.std(ddof=1) / math.sqrt(50))
    assert batch_means_stderr(np.full(400, 3.0)) == 0.0
    assert math.isnan(batch_means_stderr([1.0]))


def test_batch_means_stderr_sees_correlation():
    """
    Test that a strongly autocorrelated series has a larger error than iid.
    """
    rng = np.random.default_rng(64)
    noise = rng.standard_normal(10_000)
    series = np.empty_like(noise)
    series[0] = noise[0]
    for k in range(1, noise.size):
        series[k] = 0.95 * series[k - 1] + noise[k]

    assert batch_means_stderr(series) > 3 * series.std(ddof=1) / math.sqrt(series.size)


def _curves(f_values, eps_values, N=20, nu=2) -> ConcentrationCurves:
    m = np.arange(1, len(f_values) + 1)
    nan = np.full(len(m), np.nan)
    return ConcentrationCurves(m, np.asarray(eps_values), np.asarray(f_values), nan, N, nu)


def test_select_m_by_fd():
    """
    Test the f_d minimizer, tie-breaking and the sandwich condition.
    """
    _, s_hat = bandwidths(20, 2)
    level = s_hat**2 / 19
    eps = np.sqrt([1.0, 0.5, 2 * level, 0.5 * level, 0.1 * level] + [0.0] * 15)
    convex = (np.arange(1, 21) - 10.0) ** 2 + 1.0

    assert select_m_by_fd(_curves(convex, eps)) == (10, False)
    assert select_m_by_fd(_curves(np.ones(20), eps))[0] == 1
    sandwiched = np.full(20, 5.0)
    sandwiched[3] = 0.1
    assert select_m_by_fd(_curves(sandwiched, eps)) == (4, True)


def test_build_curves_columns(problem):
    """
    Test the curve table with and without Monte Carlo columns.
    """
    # Arrange
    eta, basis = problem
    learned = {eta.N: _replayed(eta, basis, eta.N)}

    # Act
    curves = build_curves(eta, basis, learned, m_opt=5)
    table = curves.to_table()

    # Assert
    assert list(table) == ["m", "eps_d", "f_d", "g_bar", "d_sim", "d_sim_stderr", "d_maxent", "d_app"]
    assert np.all(np.isnan(table["d_maxent"][:4]))
    np.testing.assert_allclose(table["d_maxent"][4:], 1 + np.arange(5, 21) / 19)
    assert np.isnan(table["d_sim"][0])
    assert table["d_sim"][-1] == pytest.approx(0.0, abs=1e-16)
    assert table["d_app"][-1] == pytest.approx(1 + 20 / 19)


def test_curves_table_round_trip(problem, tmp_path):
    """
    Test that the curves survive a CSV round trip to 15 digits.
    """
    eta, basis = problem
    curves = build_curves(eta, basis, m_opt=3)
    path = tmp_path / "curves.csv"

    save_table(path, curves.to_table())
    restored = ConcentrationCurves.from_table(load_table(path), eta.N, eta.nu, m_opt=3)

    np.testing.assert_allclose(restored.f_d, curves.f_d, rtol=1e-15)
    np.testing.assert_allclose(restored.eps_d, curves.eps_d, rtol=1e-15)
    assert restored.m_values.tolist() == list(range(1, 21))
    with pytest.raises(ShapeError):
        ConcentrationCurves.from_table({"m": np.arange(3)}, 3, 1)


def test_concentration_report():
    """
    Test the summary built from hand-made curves.
    """
    # Arrange
    N, nu = 10, 2
    m = np.arange(1, N + 1)
    eps = np.linspace(1.0, 0.0, N)
    sim = np.full(N, np.nan)
    stderr = np.full(N, np.nan)
    sim[[3, 9]] = [0.4, 2.1]
    stderr[[3, 9]] = [0.01, 0.05]
    curves = ConcentrationCurves(m, eps, eps**2, 1 + 0 * eps, N, nu, 4, sim, stderr)

    # Act
    report = concentration_report(curves, eps_opt=1.5)

    # Assert
    assert report["m_opt"] == 4
    assert report["d_sim_m_opt"] == 0.4
    assert report["d2_N"] == pytest.approx(1 + 10 / 9)
    assert report["d_sim_N_consistent"] is True
    assert report["better_than_unreduced"] is True
    assert report["d_sim_min_m"] == 4
    assert report["maxent_violations"] == []
    assert report["eps_d_gap_ratio"] == pytest.approx(eps[2] / eps[3])
    assert len(report["log_gamma_c"]) == N


@pytest.mark.slow
def test_unreduced_distance_matches_theory():
    """
    Test d_sim(N) = 1 + N/(N-1) within 3 standard errors at nu = 2, N = 20.
    """
    eta = whitened(2, 20, seed=65)
    basis = basis_for(eta, eps_dm=0.5)
    config = IsdeConfig(n_mc=20_000, seed=3, dr=0.02, burn_in_steps=500, spacing_steps=30, n_chains=16)

    learned = generate(eta, fit_kde(eta), basis, 20, config)
    mean, stderr = d_sim(learned, eta)

    assert abs(mean - (1 + 20 / 19)) <= 3 * stderr


@pytest.mark.slow
def test_unreduced_distance_matches_theory_in_nine_dimensions():
    """
    Test d_sim(N) = 1 + N/(N-1) within 3 standard errors at nu = 9, N = 200.
    """
    # Arrange
    raw = low_rank_raw()
    eta = normalize(fit_pca(raw, 1e-6), raw)
    basis = basis_for(eta, eps_dm=1.0)
    config = IsdeConfig(n_mc=400, seed=7, n_chains=8)

    # Act
    mean, stderr = d_sim(generate(eta, fit_kde(eta), basis, eta.N, config), eta)

    # Assert
    assert eta.nu == 9
    assert abs(mean - d_maxent(200, 200)) <= 3 * stderr
    assert d_maxent(200, 200) == pytest.approx(1 + 200 / 199)


@pytest.mark.slow
@pytest.mark.parametrize(
    ("kind", "bound_holds"),
    [("helix", True), ("ring", True), ("sheet", False)],
)
def test_reduction_beats_unreduced_with_automatic_selection(kind, bound_holds):
    """
    Test that sampling at the automatically selected order concentrates well below the unreduced distance.

    The curves also stay under the MaxEnt bound at m_opt. The sheet is a
    surface where they do not, and the report must flag that order.
    """
    # Arrange
    raw = synthetic_dataset(kind, 200, n=10, seed=0, noise=0.05)
    scaled = apply_scaling(fit_scaling(raw, "minmax"), raw)
    eta = normalize(fit_pca(scaled, 1e-6), scaled)
    selection = select_eps_m(eta, default_eps_grid(eta), threshold=0.1)
    m_opt = selection.m_opt
    basis = basis_for(eta, eps_dm=selection.eps_opt)
    kde = fit_kde(eta)
    config = IsdeConfig(n_mc=200, seed=0)

    # Act
    learned_sets = {m: generate(eta, kde, basis, m, config) for m in (m_opt, eta.N)}
    curves = build_curves(eta, basis, learned_sets, m_opt)
    report = concentration_report(curves, selection.eps_opt)

    # Assert
    reduced_mean, reduced_error = curves.d_sim[m_opt - 1], curves.d_sim_stderr[m_opt - 1]
    full_mean, full_error = curves.d_sim[-1], curves.d_sim_stderr[-1]
    assert m_opt < eta.N
    assert reduced_mean + 5 * math.hypot(reduced_error, full_error) < full_mean
    assert (m_opt in report["maxent_violations"]) is not bound_holds
    if bound_holds:
        assert reduced_mean <= d_maxent(eta.N, m_opt) + 3 * reduced_error
