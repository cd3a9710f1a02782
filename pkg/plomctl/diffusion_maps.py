"""Diffusion-maps kernel, reduced-order basis and the (eps, m) selection rule."""

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from plomctl.errors import (
    ConcentrationError,
    ConfigError,
    DuplicatePointError,
    NonMonotoneError,
    NumericalError,
    ScanRangeError,
)
from plomctl.pca import NormalizedMatrix

DUPLICATE_DISTANCE = 1e-12
MIN_GRID_POINTS = 8
PLATEAU_FACTOR = 1.5


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class DiffusionKernel:
    """
    Gaussian kernel matrix on the realizations.

    Args:
        eps_dm (float): Smoothing parameter.
        K (np.ndarray): N x N symmetric kernel with unit diagonal.
        b_diag (np.ndarray): Row sums of K.
    """

    eps_dm: float
    K: np.ndarray
    b_diag: np.ndarray

    @property
    def N(self) -> int:
        return self.K.shape[0]

    @property
    def transition(self) -> np.ndarray:
        """Row-stochastic matrix [P] = [b]^-1 [K]."""
        return self.K / self.b_diag[:, None]


def _closest_pair(squared: np.ndarray) -> tuple[tuple[int, int], float]:
    masked = squared + np.diag(np.full(squared.shape[0], np.inf))
    i, j = np.unravel_index(np.argmin(masked), masked.shape)
    i, j = sorted((int(i), int(j)))
    return (i, j), float(np.sqrt(masked[i, j]))


def _factorizes(K: np.ndarray) -> bool:
    try:
        linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def build_kernel(eta: NormalizedMatrix, eps_dm: float, check_positive_definite: bool = True) -> DiffusionKernel:
    """
    Assemble K_ij = exp(-|eta^i - eta^j|^2 / (4 eps_dm)) and its row sums.

    Args:
        eta (NormalizedMatrix): Whitened realizations.
        eps_dm (float): Smoothing parameter, > 0.
        check_positive_definite (bool): Factorize K and fail when it is not
            positive definite. Spectrum-only scans switch this off.

    Returns:
        DiffusionKernel: The kernel and its row sums.
    """
    if not eps_dm > 0:
        raise ConfigError(f"eps_dm must be positive, got {eps_dm}")
    squared = squareform(pdist(eta.eta_d.T, "sqeuclidean"))
    if eta.N > 1:
        pair, distance = _closest_pair(squared)
        if distance < DUPLICATE_DISTANCE:
            raise DuplicatePointError(*pair)
    K = np.exp(-squared / (4.0 * eps_dm))
    b = K.sum(axis=1)
    if check_positive_definite and not _factorizes(K):
        pair, distance = _closest_pair(squared)
        raise ConcentrationError(
            f"kernel matrix is numerically singular at eps_dm={eps_dm:g}: its smallest eigenvalues are "
            "below rounding, so it is not positive definite in floating point; use a smaller eps_dm",
            pair,
            distance,
        )
    return DiffusionKernel(float(eps_dm), _frozen(K), _frozen(b))


def kernel_is_positive_definite(eta: NormalizedMatrix, eps_dm: float) -> bool:
    """Whether build_kernel would accept eps_dm, without raising."""
    return _factorizes(build_kernel(eta, eps_dm, check_positive_definite=False).K)


@dataclass(frozen=True)
class DiffusionBasis:
    """
    Eigenpairs of the transition matrix and, once reduced, the order-m basis.

    Args:
        eps_dm (float): Smoothing parameter of the kernel.
        kappa (int): Power applied to eigenvalues in g^alpha = lambda^kappa psi^alpha.
        eigenvalues (np.ndarray): Descending, first one exactly 1.
        psi (np.ndarray): N x N, column alpha is psi^alpha, [b]-orthonormal.
        b_diag (np.ndarray): Kernel row sums.
        m (int | None): Retained order, None until reduce() is called.
        g (np.ndarray | None): N x m reduced basis.
        a (np.ndarray | None): N x m matrix g (g^T g)^-1.
        G (np.ndarray | None): N x N projector a g^T.
    """

    eps_dm: float
    kappa: int
    eigenvalues: np.ndarray
    psi: np.ndarray
    b_diag: np.ndarray
    m: int | None = None
    g: np.ndarray | None = None
    a: np.ndarray | None = None
    G: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.psi.shape[0]

    @property
    def is_reduced(self) -> bool:
        return self.m is not None


def solve_basis(kernel: DiffusionKernel, kappa: int = 1) -> DiffusionBasis:
    """
    Solve [K] psi = lambda [b] psi through the symmetric problem
    [b]^-1/2 [K] [b]^-1/2 phi = lambda phi, psi = [b]^-1/2 phi.
    """
    if kappa < 0:
        raise ConfigError(f"kappa must be >= 0, got {kappa}")
    root_b = np.sqrt(kernel.b_diag)
    symmetric = kernel.K / np.outer(root_b, root_b)
    symmetric = 0.5 * (symmetric + symmetric.T)
    try:
        values, phi = linalg.eigh(symmetric)
    except linalg.LinAlgError as e:
        raise NumericalError(f"eigen-solver failed at eps_dm={kernel.eps_dm:g}: {e}") from e
    values, phi = values[::-1].copy(), phi[:, ::-1].copy()

    # the leading pair is known in closed form
    values[0] = 1.0
    phi[:, 0] = root_b / np.linalg.norm(root_b)
    pivots = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[pivots, np.arange(phi.shape[1])])
    phi *= np.where(signs == 0, 1.0, signs)

    psi = phi / root_b[:, None]
    logging.debug(f"Diffusion spectrum head at eps_dm={kernel.eps_dm:g}: {values[:5].tolist()}")
    return DiffusionBasis(kernel.eps_dm, int(kappa), _frozen(values), _frozen(psi), kernel.b_diag)


def reduce(basis: DiffusionBasis, m: int) -> DiffusionBasis:
    """
    Keep the first m diffusion vectors and build [g_m], [a_m], [G_m].

    The projector only depends on the span of [g_m], so it is formed from an
    orthonormal QR factor and [a_m] from a triangular solve.
    """
    if not 1 <= m <= basis.N:
        raise ConfigError(f"order m must lie in 1..{basis.N}, got {m}")
    g = basis.psi[:, :m] * basis.eigenvalues[:m] ** basis.kappa
    Q, R = linalg.qr(g, mode="economic")
    a = linalg.solve_triangular(R, Q.T).T
    G = Q @ Q.T
    G = 0.5 * (G + G.T)
    return dataclasses.replace(basis, m=int(m), g=_frozen(g), a=_frozen(a), G=_frozen(G))


def m_hat_from_spectrum(eigenvalues, threshold: float = 0.1) -> int:
    """Smallest alpha >= 3 with lambda_alpha / lambda_2 < threshold, else N."""
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    N = eigenvalues.size
    if N < 3:
        return N
    ratios = eigenvalues[2:] / eigenvalues[1]
    below = np.flatnonzero(ratios < threshold)
    return int(below[0]) + 3 if below.size else N


def spectrum(eta: NormalizedMatrix, eps_dm: float) -> np.ndarray:
    """Descending transition-matrix eigenvalues, without the positive-definite check."""
    return solve_basis(build_kernel(eta, eps_dm, check_positive_definite=False), kappa=0).eigenvalues


def m_hat(eta: NormalizedMatrix, eps_dm: float, threshold: float = 0.1) -> int:
    return m_hat_from_spectrum(spectrum(eta, eps_dm), threshold)


def default_eps_grid(eta: NormalizedMatrix, points: int = 24, low: float = 0.1, high: float = 100.0) -> np.ndarray:
    """Geometric grid over [low, high] times the squared median pairwise distance."""
    median_sq = float(np.median(pdist(eta.eta_d.T, "sqeuclidean")))
    return np.geomspace(low * median_sq, high * median_sq, points)


@dataclass(frozen=True)
class EpsilonSelection:
    """Outcome of the eps scan: the selected pair plus the full table."""

    eps_opt: float
    m_opt: int
    grid: np.ndarray
    mhats: np.ndarray
    lambda_2: np.ndarray
    lambda_mhat: np.ndarray
    gap_ratio: float
    positive_definite: np.ndarray | None = None

    def table(self) -> dict[str, np.ndarray]:
        table = {"eps": self.grid, "mhat": self.mhats, "lambda_2": self.lambda_2, "lambda_mhat": self.lambda_mhat}
        if self.positive_definite is not None:
            table["positive_definite"] = self.positive_definite.astype(int)
        return table


def select_from_profile(grid, mhats, admissible=None) -> tuple[int, float, int]:
    """
    Apply the plateau rule to an m-hat profile.

    Returns the grid index, eps_opt and m_opt: the smallest grid eps where
    m-hat drops strictly below every smaller eps and stays constant on the
    grid points in (eps, 1.5 eps]. Plateaus starting at a grid point whose
    admissible flag is False (kernel numerically singular) are skipped.
    """
    grid = np.asarray(grid, dtype=float)
    mhats = np.asarray(mhats, dtype=int)
    admissible = np.ones(grid.size, dtype=bool) if admissible is None else np.asarray(admissible, dtype=bool)
    if grid.size < MIN_GRID_POINTS:
        raise ConfigError(f"eps grid needs at least {MIN_GRID_POINTS} points, got {grid.size}")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("eps grid must be strictly increasing")
    if admissible.shape != grid.shape:
        raise ConfigError(f"admissible flags must match the grid, got {admissible.size} for {grid.size} points")
    rises = np.flatnonzero(np.diff(mhats) > 0)
    if rises.size:
        i = int(rises[0])
        raise NonMonotoneError(
            f"m-hat rises from {mhats[i]} to {mhats[i + 1]} between eps={grid[i]:g} and eps={grid[i + 1]:g}; "
            "the plateau rule needs a non-increasing profile and a general selection method is required"
        )
    singular = None
    for i in range(1, grid.size):
        if mhats[i] >= mhats[i - 1]:
            continue
        if grid[-1] < PLATEAU_FACTOR * grid[i]:
            break
        window = (grid > grid[i]) & (grid <= PLATEAU_FACTOR * grid[i])
        if np.all(mhats[window] == mhats[i]):
            if not admissible[i]:
                singular = singular if singular is not None else i
                continue
            if mhats[i] <= 2:
                raise ScanRangeError(f"selected order m={mhats[i]} must exceed 2; refine the grid")
            return i, float(grid[i]), int(mhats[i])
    if singular is not None:
        raise ScanRangeError(
            f"the plateau at eps={grid[singular]:g} (m={mhats[singular]}) gives a numerically singular kernel "
            "and no later plateau is usable; the data are too concentrated for automatic selection, "
            "set eps_dm explicitly"
        )
    raise ScanRangeError(
        f"no plateau found on eps grid [{grid[0]:g}, {grid[-1]:g}]; widen or refine the grid"
    )


def select_eps_m(eta: NormalizedMatrix, grid=None, threshold: float = 0.1) -> EpsilonSelection:
    """
    Scan eps over a grid and select (eps_opt, m_opt).

    Args:
        eta (NormalizedMatrix): Whitened realizations.
        grid: Strictly increasing eps values; default_eps_grid when None.
        threshold (float): Eigenvalue ratio threshold for m-hat.

    Returns:
        EpsilonSelection: Selected pair, scan table and eigenvalue gap ratio.
    """
    grid = default_eps_grid(eta) if grid is None else np.asarray(grid, dtype=float)
    spectra = [spectrum(eta, eps) for eps in grid]
    mhats = np.array([m_hat_from_spectrum(values, threshold) for values in spectra], dtype=int)
    lambda_2 = np.array([values[1] if values.size > 1 else np.nan for values in spectra])
    lambda_mhat = np.array([values[m - 1] for values, m in zip(spectra, mhats)])
    positive_definite = np.array([kernel_is_positive_definite(eta, eps) for eps in grid], dtype=bool)
    for eps, m, l2, ok in zip(grid, mhats, lambda_2, positive_definite):
        logging.debug(f"eps={eps:.6g} m_hat={m} lambda_2={l2:.6g} positive_definite={ok}")

    index, eps_opt, m_opt = select_from_profile(grid, mhats, positive_definite)
    values = spectra[index]
    gap_ratio = float(values[m_opt - 1] / values[m_opt]) if m_opt < values.size else float("inf")
    logging.info(f"Selected eps_opt={eps_opt:.6g}, m_opt={m_opt} (eigenvalue gap ratio {gap_ratio:.3g})")
    return EpsilonSelection(eps_opt, m_opt, grid, mhats, lambda_2, lambda_mhat, gap_ratio, positive_definite)


def chain_invariant_measure(kernel: DiffusionKernel) -> np.ndarray:
    """Stationary distribution p(i) = b_i / sum_j b_j of the transition matrix."""
    return kernel.b_diag / kernel.b_diag.sum()
