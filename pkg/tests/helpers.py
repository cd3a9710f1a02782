import numpy as np

from plomctl.dataset_io import RawDataset
from plomctl.diffusion_maps import build_kernel, reduce, solve_basis
from plomctl.pca import NormalizedMatrix, fit_pca, normalize


def whitened(nu: int, N: int, seed: int = 0) -> NormalizedMatrix:
    """Exactly whitened nu x N matrix built from Gaussian draws."""
    rng = np.random.default_rng(seed)
    raw = RawDataset(rng.standard_normal((nu, N)))
    eta = normalize(fit_pca(raw, 1e-9), raw)
    assert eta.nu == nu
    return eta


def two_points() -> NormalizedMatrix:
    """The only whitened 1 x 2 matrix up to sign."""
    h = np.sqrt(0.5)
    return NormalizedMatrix([[-h, h]])


def three_points() -> NormalizedMatrix:
    """{-1, 0, 1}: zero mean, unit sample variance."""
    return NormalizedMatrix([[-1.0, 0.0, 1.0]])


def low_rank_raw(n: int = 220, N: int = 200, rank: int = 9, seed: int = 0, noise: float = 0.0) -> RawDataset:
    """n x N dataset whose centered covariance has exactly `rank` distinct positive eigenvalues."""
    rng = np.random.default_rng(seed)
    mixing = rng.standard_normal((n, rank))
    latent = np.linspace(1.0, 3.0, rank)[:, None] * rng.standard_normal((rank, N))
    points = 5.0 + mixing @ latent
    if noise > 0:
        points = points + noise * rng.standard_normal((n, N))
    return RawDataset(points)


def basis_for(eta: NormalizedMatrix, eps_dm: float = 1.0, kappa: int = 1, m: int | None = None):
    basis = solve_basis(build_kernel(eta, eps_dm), kappa)
    return basis if m is None else reduce(basis, m)
