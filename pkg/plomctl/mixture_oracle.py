"""
Exact Gaussian-mixture form of the reduced measure for tiny N.

The mixture has one component per multi-index j in {1..N}^N, so everything
here is exponential in N and only meant as ground truth for the sampler and
the diagnostics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from plomctl.diffusion_maps import DiffusionBasis, reduce
from plomctl.errors import ConfigError, ShapeError
from plomctl.kde import KdeModel, bandwidths
from plomctl.pca import NormalizedMatrix

DEFAULT_CAP = 6
HARD_CAP = 8
CHUNK = 1 << 15


@dataclass(frozen=True)
class MultiIndexEnumeration:
    """
    The set {0..N-1}^N in odometer order (last position fastest).

    Args:
        N (int): Base and length of each multi-index.
        cap (int): Largest N accepted; at most 8.
    """

    N: int
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.cap > HARD_CAP:
            raise ConfigError(f"enumeration cap {self.cap} exceeds the hard maximum {HARD_CAP}")
        if self.N < 1:
            raise ConfigError(f"N must be positive, got {self.N}")
        if self.N > self.cap:
            raise ConfigError(
                f"N={self.N} needs {self.N**self.N} mixture components, above the cap N <= {self.cap}"
            )
        if self.N > DEFAULT_CAP:
            logging.warning(f"Enumerating {self.N**self.N} multi-indices; expect long runtimes")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.N

    @property
    def size(self) -> int:
        return self.N**self.N

    @property
    def identity_index(self) -> int:
        """Flat position of j = (0, 1, ..., N-1), which reproduces [eta_d]."""
        return int(np.ravel_multi_index(tuple(range(self.N)), self.shape))

    def indices(self, flat) -> np.ndarray:
        """k x N multi-indices for an array of flat positions."""
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def chunks(self, chunk: int = CHUNK) -> Iterator[tuple[int, np.ndarray]]:
        for start in range(0, self.size, chunk):
            stop = min(start + chunk, self.size)
            yield start, self.indices(np.arange(start, stop))

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        for _, block in self.chunks():
            for row in block:
                yield tuple(int(v) for v in row)

    def __len__(self) -> int:
        return self.size


def stacked(eta_d: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """k x nu x N matrices [eta_d(j)] whose column l is eta_d^{j_l}."""
    return eta_d[:, indices].transpose(1, 0, 2)


@dataclass(frozen=True)
class MixtureModel:
    """
    Gaussian mixture p_Z(z) = sum_j p_j prod_k N(z^k; mean^k(j), C_m).

    Args:
        m (int): Reduction order.
        log_weights (np.ndarray): Normalized log p_j in enumeration order.
        gamma (np.ndarray): exp(-a_j / (2 s^2)), before normalization.
        a_vals (np.ndarray): <I - G_m, M_d(j)>_F for every j.
        cov (np.ndarray): m x m row covariance s_hat^2 (g^T g)^-1.
    """

    m: int
    log_weights: np.ndarray
    gamma: np.ndarray
    a_vals: np.ndarray
    cov: np.ndarray
    eta_d: np.ndarray
    a: np.ndarray
    ratio: float
    s: float
    s_hat: float
    enumeration: MultiIndexEnumeration
    uniform: bool = False
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_chol", linalg.cholesky(self.cov, lower=True))

    @property
    def nu(self) -> int:
        return self.eta_d.shape[0]

    @property
    def N(self) -> int:
        return self.eta_d.shape[1]

    @property
    def weights(self) -> np.ndarray:
        if self.uniform:
            return np.full(self.enumeration.size, 1.0 / self.enumeration.size)
        return np.exp(self.log_weights)

    def component_means(self, indices: np.ndarray) -> np.ndarray:
        """k x nu x m means (s_hat/s) [eta_d(j)] [a_m]."""
        return self.ratio * stacked(self.eta_d, indices) @ self.a

    def iter_components(self, chunk: int = CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (weights, means) over the enumeration."""
        weights = self.weights
        for start, block in self.enumeration.chunks(chunk):
            yield weights[start : start + len(block)], self.component_means(block)


def _reduced(basis: DiffusionBasis, m: int) -> DiffusionBasis:
    return basis if basis.m == m else reduce(basis, m)


def enumerate_mixture(
    eta: NormalizedMatrix, basis: DiffusionBasis, m: int, cap: int = DEFAULT_CAP, kde: KdeModel | None = None
) -> MixtureModel:
    """
    Build the mixture weights, covariance and a_j(m) for every multi-index.

    Weights are Maxwell-Boltzmann: p_j proportional to exp(-a_j / (2 s^2)),
    normalized in log domain. At m = N every a_j is 0 and p_j = 1/N^N.
    """
    basis = _reduced(basis, m)
    enumeration = MultiIndexEnumeration(eta.N, cap)
    s, s_hat = (kde.s, kde.s_hat) if kde is not None else bandwidths(eta.N, eta.nu)
    uniform = m == eta.N

    if uniform:
        a_vals = np.zeros(enumeration.size)
    else:
        residual = np.eye(eta.N) - basis.G
        a_vals = np.empty(enumeration.size)
        for start, block in enumeration.chunks():
            projected = stacked(eta.eta_d, block) @ residual
            a_vals[start : start + len(block)] = np.sum(projected**2, axis=(1, 2))
    log_gamma = -a_vals / (2.0 * s * s)
    log_weights = log_gamma - logsumexp(log_gamma)
    cov = s_hat**2 * (basis.a.T @ basis.a)
    cov = 0.5 * (cov + cov.T)

    logging.debug(f"Enumerated {enumeration.size} mixture components at m={m}")
    return MixtureModel(
        m,
        log_weights,
        np.exp(log_gamma),
        a_vals,
        cov,
        eta.eta_d,
        basis.a,
        s_hat / s,
        s,
        s_hat,
        enumeration,
        uniform,
    )


def mixture_log_pdf(model: MixtureModel, z) -> float:
    """log p_Z(z) for a nu x m matrix, stabilized by log-sum-exp."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.nu, model.m):
        raise ShapeError(f"expected a {model.nu}x{model.m} matrix, got {z.shape}")
    chol = model._chol
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    log_norm = -0.5 * model.nu * (model.m * math.log(2.0 * math.pi) + log_det)
    log_weights = np.log(model.weights) if model.uniform else model.log_weights
    partial = []
    for start, block in model.enumeration.chunks():
        diff = (z - model.component_means(block)).reshape(-1, model.m)
        white = linalg.solve_triangular(chol, diff.T, lower=True)
        quad = np.sum(white**2, axis=0).reshape(len(block), model.nu).sum(axis=1)
        partial.append(logsumexp(log_weights[start : start + len(block)] - 0.5 * quad))
    return float(logsumexp(partial) + log_norm)


def sample_mixture(model: MixtureModel, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw size x nu x m realizations of [Z_m] directly from the mixture."""
    weights = model.weights
    chosen = rng.choice(weights.size, size=size, p=weights / weights.sum())
    means = model.component_means(model.enumeration.indices(chosen))
    noise = rng.standard_normal((size, model.nu, model.m)) @ model._chol.T
    return means + noise


def z_moments(model: MixtureModel) -> tuple[np.ndarray, float]:
    """Mean matrix E[Z_m] and E|Z_m|^2 of the mixture."""
    mean = np.zeros((model.nu, model.m))
    second = 0.0
    for weights, means in model.iter_components():
        mean += np.einsum("k,kij->ij", weights, means)
        second += float(np.dot(weights, np.sum(means**2, axis=(1, 2))))
    return mean, second + model.nu * float(np.trace(model.cov))


def closed_form_moments(
    eta: NormalizedMatrix, basis: DiffusionBasis, m: int, mixture: MixtureModel | None = None
) -> tuple[np.ndarray, float]:
    """
    E[H_m] (nu x N) and E|H_m|^2 where [H_m] = [Z_m][g_m]^T.

    Returns:
        tuple[np.ndarray, float]: sum_j p_j (s_hat/s)[eta_d(j)][G_m] and
        sum_j p_j (nu s_hat^2 m + (s_hat/s)^2 <G_m, M_d(j)>_F).
    """
    basis = _reduced(basis, m)
    mixture = mixture if mixture is not None else enumerate_mixture(eta, basis, m)
    weights = mixture.weights
    mean = np.zeros((eta.nu, eta.N))
    second = 0.0
    for start, block in mixture.enumeration.chunks():
        p = weights[start : start + len(block)]
        lifted = stacked(eta.eta_d, block) @ basis.G
        mean += mixture.ratio * np.einsum("k,kij->ij", p, lifted)
        gram = np.sum(lifted**2, axis=(1, 2))
        second += float(np.dot(p, eta.nu * mixture.s_hat**2 * m + mixture.ratio**2 * gram))
    return mean, second


def exact_dsq(eta: NormalizedMatrix, basis: DiffusionBasis, m: int, mixture: MixtureModel | None = None) -> float:
    """
    Relative squared distance d^2(m) = E|H_m - eta_d|^2 / |eta_d|^2.

    Evaluated as 1 + m s_hat^2/(N-1) + |eta_d|^-2 sum_j p_j <G_m, B_d(j)>_F.
    """
    N = eta.N
    if m == N:
        return 1.0 + N / (N - 1)
    basis = _reduced(basis, m)
    mixture = mixture if mixture is not None else enumerate_mixture(eta, basis, m)
    weights = mixture.weights
    ratio = mixture.ratio
    total = 0.0
    for start, block in mixture.enumeration.chunks():
        X = stacked(eta.eta_d, block)
        cross = X.transpose(0, 2, 1) @ eta.eta_d
        B = ratio**2 * (X.transpose(0, 2, 1) @ X) - ratio * (cross + cross.transpose(0, 2, 1))
        total += float(np.dot(weights[start : start + len(block)], np.sum(basis.G * B, axis=(1, 2))))
    return 1.0 + m * mixture.s_hat**2 / (N - 1) + total / eta.norm_sq


def _distance_terms(eta: NormalizedMatrix, basis: DiffusionBasis, mixture: MixtureModel) -> np.ndarray:
    """|eta_d G - (s_hat/s) eta_d(j) G|^2 / |eta_d|^2 for every j."""
    target = eta.eta_d @ basis.G
    values = np.empty(mixture.enumeration.size)
    for start, block in mixture.enumeration.chunks():
        lifted = mixture.ratio * stacked(eta.eta_d, block) @ basis.G
        values[start : start + len(block)] = np.sum((target - lifted) ** 2, axis=(1, 2))
    return values / eta.norm_sq


def h_d(eta: NormalizedMatrix, basis: DiffusionBasis, m: int, mixture: MixtureModel | None = None) -> float:
    """Weighted mean of the distance terms; equals d^2 - f_d."""
    basis = _reduced(basis, m)
    mixture = mixture if mixture is not None else enumerate_mixture(eta, basis, m)
    return float(np.dot(mixture.weights, _distance_terms(eta, basis, mixture)))


def exact_g_bar(eta: NormalizedMatrix, basis: DiffusionBasis, m: int, mixture: MixtureModel | None = None) -> float:
    """Uniformly weighted mean of the distance terms."""
    basis = _reduced(basis, m)
    mixture = mixture if mixture is not None else enumerate_mixture(eta, basis, m)
    return float(np.mean(_distance_terms(eta, basis, mixture)))


def exact_r(eta: NormalizedMatrix, basis: DiffusionBasis, m: int, mixture: MixtureModel | None = None) -> float:
    basis = _reduced(basis, m)
    mixture = mixture if mixture is not None else enumerate_mixture(eta, basis, m)
    if mixture.uniform:
        return 1.0
    terms = _distance_terms(eta, basis, mixture)
    return float(np.dot(mixture.weights, terms) / np.mean(terms))


@dataclass(frozen=True)
class RHypothesisReport:
    """r(m) for every order and the orders m >= m_opt where r(m) > 1."""

    m_values: np.ndarray
    r: np.ndarray
    m_opt: int
    violations: list[int]

    @property
    def holds(self) -> bool:
        return not self.violations


def r_hypothesis_report(eta: NormalizedMatrix, basis: DiffusionBasis, m_opt: int, cap: int = DEFAULT_CAP) -> RHypothesisReport:
    """Evaluate r(m) = h_d(m) / g_bar(m) exactly and flag r(m) > 1 on m >= m_opt."""
    m_values = np.arange(1, eta.N + 1)
    r = np.array([exact_r(eta, basis, int(m), enumerate_mixture(eta, basis, int(m), cap)) for m in m_values])
    violations = [int(m) for m, value in zip(m_values, r) if m >= m_opt and value > 1.0]
    if violations:
        logging.warning(f"r(m) > 1 for m in {violations}; the concentration bound is not guaranteed there")
    return RHypothesisReport(m_values, r, m_opt, violations)


@dataclass(frozen=True)
class SumIdentityReport:
    """Max absolute residuals of the three enumeration averages."""

    mean: float
    m_matrix: float
    b_matrix: float

    @property
    def max_residual(self) -> float:
        return max(self.mean, self.m_matrix, self.b_matrix)


def verify_sum_identities(eta: NormalizedMatrix, cap: int = DEFAULT_CAP) -> SumIdentityReport:
    """
    Check the uniform averages over all j of [eta_d(j)], [M_d(j)] and [B_d(j)]
    against 0, (|eta_d|^2/N) I_N and (s_hat/s)^2 (|eta_d|^2/N) I_N.
    """
    enumeration = MultiIndexEnumeration(eta.N, cap)
    N = eta.N
    s, s_hat = bandwidths(N, eta.nu)
    ratio = s_hat / s
    sum_x = np.zeros((eta.nu, N))
    sum_m = np.zeros((N, N))
    sum_b = np.zeros((N, N))
    for _, block in enumeration.chunks():
        X = stacked(eta.eta_d, block)
        gram = X.transpose(0, 2, 1) @ X
        cross = X.transpose(0, 2, 1) @ eta.eta_d
        sum_x += X.sum(axis=0)
        sum_m += gram.sum(axis=0)
        sum_b += (ratio**2 * gram - ratio * (cross + cross.transpose(0, 2, 1))).sum(axis=0)
    count = enumeration.size
    level = eta.norm_sq / N
    report = SumIdentityReport(
        float(np.max(np.abs(sum_x / count))),
        float(np.max(np.abs(sum_m / count - level * np.eye(N)))),
        float(np.max(np.abs(sum_b / count - ratio**2 * level * np.eye(N)))),
    )
    logging.info(f"Sum identity residuals: {report}")
    return report
