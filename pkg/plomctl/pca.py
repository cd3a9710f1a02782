import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import linalg

from plomctl.dataset_io import RawDataset
from plomctl.errors import ConfigError, DimensionError, SchemaError, ShapeError

ZERO_EIGENVALUE_RATIO = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PcaModel:
    """
    Truncated principal component model of a scaled dataset.

    Args:
        mean (np.ndarray): Empirical mean, length n.
        eigenvalues (np.ndarray): Retained covariance eigenvalues, length nu, non-increasing.
        eigenvectors (np.ndarray): n x nu matrix with orthonormal columns.
        err_pca (float): Relative error achieved with nu components.
        eps_tol (float): Requested relative error.
    """

    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    err_pca: float
    eps_tol: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        eigenvalues = np.array(self.eigenvalues, dtype=float).reshape(-1)
        eigenvectors = np.array(self.eigenvectors, dtype=float).reshape(mean.size, eigenvalues.size)
        if np.any(eigenvalues <= 0):
            raise DimensionError("PCA eigenvalues must be strictly positive")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "eigenvalues", _frozen(eigenvalues))
        object.__setattr__(self, "eigenvectors", _frozen(eigenvectors))

    @property
    def nu(self) -> int:
        return self.eigenvalues.size

    @property
    def n(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": self.eigenvectors.tolist(),
            "nu": self.nu,
            "err_pca": float(self.err_pca),
            "eps_tol": float(self.eps_tol),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "PcaModel":
        try:
            model = cls(
                payload["mean"],
                payload["eigenvalues"],
                payload["eigenvectors"],
                payload["err_pca"],
                payload["eps_tol"],
            )
        except (KeyError, ValueError) as e:
            raise SchemaError(f"invalid PCA record: {e}") from e
        if model.nu != payload.get("nu", model.nu):
            raise SchemaError(f"PCA record declares nu={payload['nu']} but stores {model.nu} eigenvalues")
        return model


@dataclass(frozen=True)
class NormalizedMatrix:
    """
    The nu x N matrix [eta_d] of whitened realizations (columns).
    """

    eta_d: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta_d, dtype=float)
        if eta.ndim != 2:
            raise ShapeError(f"normalized matrix must be 2-D, got shape {eta.shape}")
        object.__setattr__(self, "eta_d", _frozen(eta))

    @property
    def nu(self) -> int:
        return self.eta_d.shape[0]

    @property
    def N(self) -> int:
        return self.eta_d.shape[1]

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.eta_d**2))

    def moment_residuals(self) -> dict[str, float]:
        """Deviation from zero mean, identity covariance and norm nu(N-1)."""
        mean = self.eta_d.mean(axis=1)
        cov = self.eta_d @ self.eta_d.T / (self.N - 1)
        expected = self.nu * (self.N - 1)
        return {
            "mean": float(np.max(np.abs(mean))),
            "covariance": float(np.max(np.abs(cov - np.eye(self.nu)))),
            "norm": abs(self.norm_sq - expected) / expected,
        }


def _spectrum(centered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, N = centered.shape
    if n <= N:
        covariance = centered @ centered.T / (N - 1)
        values, vectors = linalg.eigh(covariance)
        return values[::-1], vectors[:, ::-1]
    # more features than realizations: diagonalize the Gram matrix instead
    gram = centered.T @ centered / (N - 1)
    values, vectors = linalg.eigh(gram)
    values, vectors = values[::-1], vectors[:, ::-1]
    keep = values > ZERO_EIGENVALUE_RATIO * max(values[0], 0.0)
    values = values[keep]
    vectors = centered @ vectors[:, keep] / np.sqrt((N - 1) * values)
    return values, vectors


def fit_pca(scaled: RawDataset, eps_tol: float) -> PcaModel:
    """
    Fit the truncated PCA with the fewest components meeting eps_tol.

    Args:
        scaled (RawDataset): Scaled training realizations.
        eps_tol (float): Requested relative error, in (0, 1).

    Returns:
        PcaModel: nu is the smallest order with err_pca(nu) <= eps_tol and nu < N.
    """
    if not 0.0 < eps_tol < 1.0:
        raise ConfigError(f"eps_tol must lie in (0, 1), got {eps_tol}")
    N = scaled.N
    if N < 3:
        raise ShapeError(f"PCA needs at least 3 realizations, got {N}")

    mean = scaled.points.mean(axis=1)
    centered = scaled.points - mean[:, None]
    trace = float(np.sum(centered**2)) / (N - 1)
    if trace <= 0:
        raise DimensionError("all realizations coincide; the covariance is zero")
    values, vectors = _spectrum(centered)

    usable = int(np.sum(values > ZERO_EIGENVALUE_RATIO * values[0]))
    limit = min(usable, N - 1)
    errors = 1.0 - np.cumsum(values[:limit]) / trace
    reached = np.flatnonzero(errors <= eps_tol)
    if reached.size == 0:
        raise DimensionError(
            f"err_pca={errors[-1]:.3e} with nu={limit} still exceeds eps_tol={eps_tol:g}; "
            f"use more realizations (N={N}) or a looser tolerance"
        )
    nu = int(reached[0]) + 1

    vectors = vectors[:, :nu].copy()
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(nu)])
    vectors *= np.where(signs == 0, 1.0, signs)

    model = PcaModel(mean, values[:nu], vectors, float(max(errors[nu - 1], 0.0)), eps_tol)
    logging.info(f"PCA retained nu={nu} of n={scaled.n} components, err_pca={model.err_pca:.3e}")
    return model


def whiten(model: PcaModel, x) -> np.ndarray:
    """eta = mu^(-1/2) Phi^T (x - mean) for an n-vector or n x K matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.n:
        raise ShapeError(f"PCA model expects {model.n} features, got {x.shape[0]}")
    centered = x - (model.mean if x.ndim == 1 else model.mean[:, None])
    projected = model.eigenvectors.T @ centered
    scale = 1.0 / np.sqrt(model.eigenvalues)
    return projected * (scale if x.ndim == 1 else scale[:, None])


def normalize(model: PcaModel, scaled: RawDataset) -> NormalizedMatrix:
    """Whiten every realization of a scaled dataset into [eta_d]."""
    eta = NormalizedMatrix(whiten(model, scaled.points))
    logging.debug(f"Normalized matrix residuals: {eta.moment_residuals()}")
    return eta


def reconstruct(model: PcaModel, eta) -> np.ndarray:
    """x = mean + Phi mu^(1/2) eta for a nu-vector or nu x K matrix."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape[0] != model.nu:
        raise ShapeError(f"PCA model has nu={model.nu}, got {eta.shape[0]} coordinates")
    scale = np.sqrt(model.eigenvalues)
    lifted = model.eigenvectors @ (eta * (scale if eta.ndim == 1 else scale[:, None]))
    return lifted + (model.mean if eta.ndim == 1 else model.mean[:, None])
