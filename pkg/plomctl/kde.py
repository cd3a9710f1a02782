"""Gaussian kernel density model of the normalized data and its potential/drift pair."""

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from plomctl.errors import ShapeError
from plomctl.pca import NormalizedMatrix

# weights below exp(-700) relative to the largest are exact zeros
LOG_WEIGHT_FLOOR = -700.0


def bandwidths(N: int, nu: int) -> tuple[float, float]:
    """
    Silverman bandwidth s and the modified bandwidth s_hat.

    Args:
        N (int): Number of realizations, at least 2.
        nu (int): Dimension, at least 1.

    Returns:
        tuple[float, float]: (s, s_hat) with 0 < s_hat < s.
    """
    if N < 2 or nu < 1:
        raise ShapeError(f"bandwidths need N >= 2 and nu >= 1, got N={N}, nu={nu}")
    s = (4.0 / (N * (nu + 2))) ** (1.0 / (nu + 4))
    s_hat = s / math.sqrt(s * s + (N - 1) / N)
    return s, s_hat


@dataclass(frozen=True)
class KdeModel:
    """
    Kernel density estimate p_H built on the columns of [eta_d].

    Args:
        s (float): Silverman bandwidth.
        s_hat (float): Modified bandwidth used by the kernels.
        eta_d (np.ndarray): nu x N kernel centers before the s_hat/s shrink.
    """

    s: float
    s_hat: float
    eta_d: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta_d.eta_d if isinstance(self.eta_d, NormalizedMatrix) else self.eta_d, dtype=float)
        if eta.ndim != 2:
            raise ShapeError(f"kernel centers must be a nu x N matrix, got shape {eta.shape}")
        eta.setflags(write=False)
        object.__setattr__(self, "eta_d", eta)
        centers = (self.s_hat / self.s) * eta
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)

    @property
    def ratio(self) -> float:
        return self.s_hat / self.s

    @property
    def nu(self) -> int:
        return self.eta_d.shape[0]

    @property
    def N(self) -> int:
        return self.eta_d.shape[1]

    @property
    def centers(self) -> np.ndarray:
        return self._centers

    def to_dict(self) -> dict[str, Any]:
        return {"s": self.s, "s_hat": self.s_hat, "ratio": self.ratio, "N": self.N, "nu": self.nu}


def fit_kde(eta: NormalizedMatrix) -> KdeModel:
    s, s_hat = bandwidths(eta.N, eta.nu)
    logging.info(f"KDE bandwidths: s={s:.6f}, s_hat={s_hat:.6f}, ratio={s_hat / s:.6f}")
    return KdeModel(s, s_hat, eta.eta_d)


def _as_columns(model: KdeModel, u) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    columns = u[:, None] if single else u
    if columns.ndim != 2 or columns.shape[0] != model.nu:
        raise ShapeError(f"expected points with nu={model.nu} rows, got shape {u.shape}")
    return columns, single


def _log_kernels(model: KdeModel, columns: np.ndarray) -> np.ndarray:
    """K x N matrix of -|center_j - u^l|^2 / (2 s_hat^2)."""
    distances = cdist(columns.T, model.centers.T, "sqeuclidean")
    return -distances / (2.0 * model.s_hat**2)


def potential(model: KdeModel, u):
    """
    V(u) = -log( (1/N) sum_j exp(-|center_j - u|^2 / (2 s_hat^2)) ).

    Accepts a nu-vector (returns a float) or a nu x K matrix (returns K values).
    """
    columns, single = _as_columns(model, u)
    values = math.log(model.N) - logsumexp(_log_kernels(model, columns), axis=1)
    return float(values[0]) if single else values


def log_pdf(model: KdeModel, eta):
    """log p_H(eta) evaluated through the potential, never through raw exponentials."""
    normalizer = model.nu * math.log(math.sqrt(2.0 * math.pi) * model.s_hat)
    values = -np.asarray(potential(model, eta)) - normalizer
    return float(values) if values.ndim == 0 else values


def pdf(model: KdeModel, eta):
    return np.exp(log_pdf(model, eta))


def drift(model: KdeModel, u_matrix) -> np.ndarray:
    """
    Column-wise drift [L([u])] = -grad V, for a nu x K matrix.

    Args:
        model (KdeModel): Density model.
        u_matrix (np.ndarray): nu x K matrix of evaluation points.

    Returns:
        np.ndarray: nu x K matrix, column l is -grad V(u^l).
    """
    columns, single = _as_columns(model, u_matrix)
    logs = _log_kernels(model, columns)
    logs -= logs.max(axis=1, keepdims=True)
    weights = np.where(logs < LOG_WEIGHT_FLOOR, 0.0, np.exp(logs))
    mean = (model.centers @ weights.T) / weights.sum(axis=1)
    result = (mean - columns) / model.s_hat**2
    return result[:, 0] if single else result


def drift_column(model: KdeModel, u) -> np.ndarray:
    """Drift at a single nu-vector."""
    return drift(model, np.asarray(u, dtype=float).reshape(model.nu))


def matrix_log_pdf(model: KdeModel, eta_matrix) -> float:
    """log density of a nu x N random matrix with independent columns."""
    columns, _ = _as_columns(model, eta_matrix)
    return float(np.sum(log_pdf(model, columns)))
