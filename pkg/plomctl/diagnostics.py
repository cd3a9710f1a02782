"""Concentration diagnostics and the curves used to choose and certify m."""

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import linalg

from plomctl.diffusion_maps import DiffusionBasis
from plomctl.errors import ConfigError, InconsistencyError, ShapeError
from plomctl.isde_sampler import LearnedSet
from plomctl.kde import bandwidths
from plomctl.pca import NormalizedMatrix

LOG_FLUSH = -700.0
BATCH_MEANS_MIN_SAMPLES = 100
CURVE_COLUMNS = ("m", "eps_d", "f_d", "g_bar", "d_sim", "d_sim_stderr", "d_maxent", "d_app")


def eps_d_curve(eta: NormalizedMatrix, basis: DiffusionBasis) -> np.ndarray:
    """
    eps_d(m) for m = 1..N from the projector spectrum.

    The first m columns of an orthonormal QR factor of [psi] span the same
    space as [g_m], so eps_d(m)^2 is the share of |eta_d|^2 carried by the
    remaining columns. The tail sums make eps_d(N) exactly 0.
    """
    Q, _ = linalg.qr(basis.psi)
    shares = np.sum((eta.eta_d @ Q) ** 2, axis=0) / eta.norm_sq
    tail = np.cumsum(shares[::-1])[::-1]
    eps_sq = np.append(tail[1:], 0.0)
    return np.sqrt(eps_sq)


def eps_d(eta: NormalizedMatrix, basis: DiffusionBasis, m: int) -> float:
    """Relative distance |eta_d - eta_d G_m| / |eta_d|."""
    if not 1 <= m <= eta.N:
        raise ConfigError(f"order m must lie in 1..{eta.N}, got {m}")
    return float(eps_d_curve(eta, basis)[m - 1])


def f_d(N: int, nu: int, eps_d_value: float, m: int) -> float:
    """f_d(m) = m s_hat^2 / (N - 1) + eps_d(m)^2."""
    _, s_hat = bandwidths(N, nu)
    return m * s_hat**2 / (N - 1) + eps_d_value**2


def g_bar(N: int, nu: int, eps_d_value: float, m: int) -> float:
    """g_bar(m) = 1 + (s_hat/s)^2 m/N - eps_d(m)^2, which must be positive."""
    s, s_hat = bandwidths(N, nu)
    value = 1.0 + (s_hat / s) ** 2 * m / N - eps_d_value**2
    if value <= 0:
        raise InconsistencyError(f"g_bar({m}) = {value:.6g} is not positive; eps_d={eps_d_value:.6g} is invalid")
    return value


def batch_means_stderr(values) -> float:
    """Standard error of the mean with batches of floor(sqrt(n)) samples."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        return float("nan")
    if n < BATCH_MEANS_MIN_SAMPLES:
        return float(values.std(ddof=1) / math.sqrt(n))
    size = int(math.floor(math.sqrt(n)))
    count = n // size
    batches = values[: count * size].reshape(count, size).mean(axis=1)
    return float(math.sqrt(size * batches.var(ddof=1) / (count * size)))


def distances(learned: LearnedSet, eta: NormalizedMatrix) -> np.ndarray:
    """Per-sample |eta_ar - eta_d|^2 / |eta_d|^2."""
    if (learned.nu, learned.N) != (eta.nu, eta.N):
        raise ShapeError(
            f"learned matrices are {learned.nu}x{learned.N} but [eta_d] is {eta.nu}x{eta.N}"
        )
    parts = [np.sum((block - eta.eta_d) ** 2, axis=(1, 2)) for block in learned.iter_eta()]
    return np.concatenate(parts) / eta.norm_sq


def d_sim(learned: LearnedSet, eta: NormalizedMatrix) -> tuple[float, float]:
    """
    Monte Carlo estimate of d^2(m) and its standard error.

    Returns:
        tuple[float, float]: (mean relative squared distance, standard error).
    """
    if learned.n_mc == 0:
        raise ShapeError("the learned set is empty")
    values = distances(learned, eta)
    return float(values.mean()), batch_means_stderr(values)


def d_maxent(N: int, m: int) -> float:
    return 1.0 + m / (N - 1)


def d_app(N: int, nu: int, eta: NormalizedMatrix, basis: DiffusionBasis, m: int) -> float:
    """f_d(m) + g_bar(m) exp(-eps_d^2 |eta_d|^2 / (2 s^2)), flushed to f_d below e^-700."""
    return _d_app_from_eps(N, nu, eps_d(eta, basis, m), m, eta.norm_sq)


def _d_app_from_eps(N: int, nu: int, eps_value: float, m: int, norm_sq: float) -> float:
    s, _ = bandwidths(N, nu)
    exponent = -(eps_value**2) * norm_sq / (2.0 * s * s)
    damping = 0.0 if exponent < LOG_FLUSH else math.exp(exponent)
    return f_d(N, nu, eps_value, m) + g_bar(N, nu, eps_value, m) * damping


def log_gamma_c(N: int, nu: int, m: int) -> float:
    """log of the MaxEnt weight: -(nu (N - m) / 2) ln(1 + sigma^2 / s^2), sigma^2 = 1 - 1/N."""
    if not 1 <= m <= N:
        raise ConfigError(f"order m must lie in 1..{N}, got {m}")
    s, _ = bandwidths(N, nu)
    sigma_sq = 1.0 - 1.0 / N
    return -(nu * (N - m) / 2.0) * math.log1p(sigma_sq / (s * s))


def entropy_ratio(N: int, nu: int) -> float:
    """Entropy of the MaxEnt Gaussian surrogate over that of the uniform data measure."""
    if N < 2 or nu < 1:
        raise ConfigError(f"entropy ratio needs N >= 2 and nu >= 1, got N={N}, nu={nu}")
    return nu * (math.log(2.0 * math.pi * math.e) + math.log1p(-1.0 / N)) / (2.0 * math.log(N))


@dataclass(frozen=True)
class ConcentrationCurves:
    """
    Per-m diagnostic curves. Monte Carlo and MaxEnt columns hold NaN where
    they were not computed.
    """

    m_values: np.ndarray
    eps_d: np.ndarray
    f_d: np.ndarray
    g_bar: np.ndarray
    N: int
    nu: int
    m_opt: int | None = None
    d_sim: np.ndarray | None = None
    d_sim_stderr: np.ndarray | None = None
    d_maxent: np.ndarray | None = None
    d_app: np.ndarray | None = None

    @property
    def s(self) -> float:
        return bandwidths(self.N, self.nu)[0]

    @property
    def s_hat(self) -> float:
        return bandwidths(self.N, self.nu)[1]

    def _column(self, values) -> np.ndarray:
        if values is None:
            return np.full(len(self.m_values), np.nan)
        return np.asarray(values, dtype=float)

    def to_table(self) -> dict[str, np.ndarray]:
        return {
            "m": np.asarray(self.m_values, dtype=float),
            "eps_d": self._column(self.eps_d),
            "f_d": self._column(self.f_d),
            "g_bar": self._column(self.g_bar),
            "d_sim": self._column(self.d_sim),
            "d_sim_stderr": self._column(self.d_sim_stderr),
            "d_maxent": self._column(self.d_maxent),
            "d_app": self._column(self.d_app),
        }

    @classmethod
    def from_table(cls, table: dict[str, np.ndarray], N: int, nu: int, m_opt: int | None = None) -> "ConcentrationCurves":
        missing = [name for name in CURVE_COLUMNS if name not in table]
        if missing:
            raise ShapeError(f"curves table is missing columns: {', '.join(missing)}")
        return cls(
            table["m"].astype(int),
            table["eps_d"],
            table["f_d"],
            table["g_bar"],
            N,
            nu,
            m_opt,
            table["d_sim"],
            table["d_sim_stderr"],
            table["d_maxent"],
            table["d_app"],
        )


def select_m_by_fd(curves: ConcentrationCurves) -> tuple[int, bool]:
    """
    The order minimizing f_d (smallest m on ties) and whether the sandwich
    eps_d(m*)^2 < s_hat^2/(N-1) < eps_d(m*-1)^2 holds there.
    """
    f = np.asarray(curves.f_d, dtype=float)
    index = int(np.argmin(f))
    m_star = int(curves.m_values[index])
    level = curves.s_hat**2 / (curves.N - 1)
    eps_sq = np.asarray(curves.eps_d, dtype=float) ** 2
    below = eps_sq[index] < level
    above = index == 0 or level < eps_sq[index - 1]
    return m_star, bool(below and above)


def build_curves(
    eta: NormalizedMatrix,
    basis: DiffusionBasis,
    learned_sets: dict[int, LearnedSet] | None = None,
    m_opt: int | None = None,
) -> ConcentrationCurves:
    """
    Evaluate every curve on m = 1..N.

    Args:
        eta (NormalizedMatrix): Whitened training matrix.
        basis (DiffusionBasis): Solved diffusion basis at eps_opt.
        learned_sets (dict[int, LearnedSet] | None): Learned sets keyed by m,
            used for the Monte Carlo column.
        m_opt (int | None): Selected order; MaxEnt and rough approximations
            are reported for m >= m_opt (all m when None).

    Returns:
        ConcentrationCurves: All columns, NaN where not applicable.
    """
    N, nu = eta.N, eta.nu
    m_values = np.arange(1, N + 1)
    eps = eps_d_curve(eta, basis)
    fd = np.array([f_d(N, nu, e, int(m)) for e, m in zip(eps, m_values)])
    gb = np.array([g_bar(N, nu, e, int(m)) for e, m in zip(eps, m_values)])
    start = 1 if m_opt is None else m_opt
    maxent = np.array([d_maxent(N, int(m)) if m >= start else np.nan for m in m_values])
    approx = np.array(
        [_d_app_from_eps(N, nu, e, int(m), eta.norm_sq) if m >= start else np.nan for e, m in zip(eps, m_values)]
    )

    sim = np.full(N, np.nan)
    stderr = np.full(N, np.nan)
    for m, learned in sorted((learned_sets or {}).items()):
        sim[m - 1], stderr[m - 1] = d_sim(learned, eta)
        logging.info(f"d_sim({m}) = {sim[m - 1]:.6f} +/- {stderr[m - 1]:.2g}")
    return ConcentrationCurves(m_values, eps, fd, gb, N, nu, m_opt, sim, stderr, maxent, approx)


def concentration_report(curves: ConcentrationCurves, eps_opt: float | None = None, sigmas: float = 3.0) -> dict[str, Any]:
    """
    Summarize the curves: values at m_opt and N, the MaxEnt bound and
    whether the reduced generator beats the unreduced one.
    """
    N, nu = curves.N, curves.nu
    m_opt = curves.m_opt
    d2_full = d_maxent(N, N)
    sim = curves._column(curves.d_sim)
    stderr = curves._column(curves.d_sim_stderr)

    def at(values, m):
        if m is None or not 1 <= m <= N or np.isnan(values[m - 1]):
            return None
        return float(values[m - 1])

    report: dict[str, Any] = {
        "N": N,
        "nu": nu,
        "s": curves.s,
        "s_hat": curves.s_hat,
        "m_opt": m_opt,
        "eps_opt": eps_opt,
        "m_fd": select_m_by_fd(curves)[0],
        "fd_sandwich": select_m_by_fd(curves)[1],
        "d_sim_m_opt": at(sim, m_opt),
        "d_sim_m_opt_stderr": at(stderr, m_opt),
        "d_sim_N": at(sim, N),
        "d_sim_N_stderr": at(stderr, N),
        "d2_N": d2_full,
        "entropy_ratio": entropy_ratio(N, nu),
        "log_gamma_c": [log_gamma_c(N, nu, int(m)) for m in curves.m_values],
    }
    if report["d_sim_N"] is not None:
        report["d_sim_N_consistent"] = abs(report["d_sim_N"] - d2_full) <= sigmas * report["d_sim_N_stderr"]

    if m_opt is not None:
        candidates = [int(m) for m in curves.m_values if m >= m_opt and not np.isnan(sim[m - 1])]
        bound = d_maxent(N, m_opt)
        report["maxent_bound"] = bound
        if candidates:
            best = min(candidates, key=lambda m: sim[m - 1])
            best_value, best_error = float(sim[best - 1]), float(stderr[best - 1])
            report["d_sim_min"] = best_value
            report["d_sim_min_m"] = best
            report["better_than_unreduced"] = best_value <= bound + sigmas * best_error < d2_full
            report["maxent_violations"] = [
                m for m in candidates if sim[m - 1] > d_maxent(N, m) + sigmas * stderr[m - 1]
            ]
        if 1 < m_opt <= N:
            eps = np.asarray(curves.eps_d, dtype=float)
            report["eps_d_gap_ratio"] = float(eps[m_opt - 2] / eps[m_opt - 1]) if eps[m_opt - 1] > 0 else None
    return report
