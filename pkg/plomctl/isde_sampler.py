"""
Reduced-order ISDE generator integrated with a dissipative Stormer-Verlet scheme.

All chains advance together as one stacked array, but every chain draws
from its own Philox stream keyed by (seed, chain index), so the draws of a
chain never depend on how many other chains run.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

from plomctl.dataset_io import LearnedArchive, ScalingSpec, invert_scaling
from plomctl.diffusion_maps import DiffusionBasis, reduce
from plomctl.errors import ConfigError, DivergenceError, ShapeError
from plomctl.kde import KdeModel, drift
from plomctl.pca import NormalizedMatrix, PcaModel, reconstruct

TRANSIENT_DECAY = 1000.0


def default_dr(s_hat: float) -> float:
    return 2.0 * math.pi * s_hat / 20.0


@dataclass(frozen=True)
class IsdeConfig:
    """
    Integration and sampling schedule of the generator.

    Args:
        n_mc (int): Number of learned matrices to retain.
        seed (int): Root seed of the per-chain streams.
        f0 (float): Dissipation parameter.
        dr (float | None): Time step; 2 pi s_hat / 20 when None.
        burn_in_steps (int | None): Steps discarded per chain; chosen so that
            exp(-f0 r / 2) < 1e-3 when None.
        spacing_steps (int | None): Steps between retained states; a quarter
            of the burn-in when None.
        n_chains (int): Number of independent chains.
    """

    n_mc: int
    seed: int = 0
    f0: float = 1.5
    dr: float | None = None
    burn_in_steps: int | None = None
    spacing_steps: int | None = None
    n_chains: int = 8

    def resolve(self, s_hat: float) -> "IsdeConfig":
        """Fill every unset schedule field from its default."""
        dr = self.dr if self.dr is not None else default_dr(s_hat)
        burn_in = self.burn_in_steps
        if burn_in is None:
            if not self.f0 > 0 or not dr > 0:
                raise ConfigError(f"f0 and dr must be positive, got f0={self.f0}, dr={dr}")
            burn_in = math.ceil(2.0 * math.log(TRANSIENT_DECAY) / (self.f0 * dr))
        spacing = self.spacing_steps if self.spacing_steps is not None else max(1, math.ceil(burn_in / 4))
        return dataclasses.replace(self, dr=dr, burn_in_steps=burn_in, spacing_steps=spacing)

    def validate(self) -> None:
        if self.n_mc < 1:
            raise ConfigError(f"n_mc must be at least 1, got {self.n_mc}; there is nothing to generate")
        if not self.f0 > 0:
            raise ConfigError(f"f0 must be positive, got {self.f0}")
        if self.dr is None or not self.dr > 0:
            raise ConfigError(f"dr must be positive, got {self.dr}")
        if self.burn_in_steps is None or self.burn_in_steps < 0:
            raise ConfigError(f"burn_in_steps must be >= 0, got {self.burn_in_steps}")
        if self.spacing_steps is None or self.spacing_steps < 1:
            raise ConfigError(f"spacing_steps must be >= 1, got {self.spacing_steps}")
        if self.n_chains < 1:
            raise ConfigError(f"n_chains must be >= 1, got {self.n_chains}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def chain_counts(self) -> list[int]:
        """Retained states per chain; the first n_mc % n_chains chains keep one more."""
        base, extra = divmod(self.n_mc, self.n_chains)
        return [base + (1 if c < extra else 0) for c in range(self.n_chains)]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    """Counter-based stream for one chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain_index,))))


@dataclass(frozen=True)
class ChainState:
    """Position [Z], velocity [Y] (both nu x m) and pseudo-time r."""

    z: np.ndarray
    y: np.ndarray
    r: float = 0.0


def _require_reduced(basis: DiffusionBasis) -> None:
    if not basis.is_reduced:
        raise ConfigError("the diffusion basis must be reduced to an order m before sampling")


def init_chain(eta: NormalizedMatrix, basis: DiffusionBasis, rng_stream: np.random.Generator) -> ChainState:
    """Start at [Z] = [eta_d][a_m] with velocity [v0][a_m], [v0] standard normal."""
    _require_reduced(basis)
    v0 = rng_stream.standard_normal((eta.nu, eta.N))
    return ChainState(eta.eta_d @ basis.a, v0 @ basis.a, 0.0)


def reduced_drift(kde: KdeModel, basis: DiffusionBasis, z: np.ndarray) -> np.ndarray:
    """
    L(z) = [L(z g_m^T)] a_m.

    Args:
        kde (KdeModel): Density model.
        basis (DiffusionBasis): Reduced basis.
        z (np.ndarray): nu x m state, or a C x nu x m stack of states.

    Returns:
        np.ndarray: Same shape as z.
    """
    _require_reduced(basis)
    z = np.asarray(z, dtype=float)
    if z.shape[-2:] != (kde.nu, basis.m):
        raise ShapeError(f"state must be {kde.nu}x{basis.m}, got {z.shape[-2:]}")
    u = z @ basis.g.T
    if u.ndim == 2:
        return drift(kde, u) @ basis.a
    chains = u.shape[0]
    columns = u.transpose(1, 0, 2).reshape(kde.nu, chains * basis.N)
    lifted = drift(kde, columns).reshape(kde.nu, chains, basis.N).transpose(1, 0, 2)
    return lifted @ basis.a


def _verlet_update(z, y, kde, basis, f0, dr, dW):
    b = f0 * dr / 4.0
    z_half = z + 0.5 * dr * y
    y_next = ((1.0 - b) / (1.0 + b)) * y + (dr / (1.0 + b)) * reduced_drift(kde, basis, z_half)
    if dW is not None:
        y_next = y_next + (math.sqrt(f0) / (1.0 + b)) * (dW @ basis.a)
    return z_half + 0.5 * dr * y_next, y_next


def step(
    state: ChainState,
    kde: KdeModel,
    basis: DiffusionBasis,
    config: IsdeConfig,
    rng_stream: np.random.Generator | None,
) -> ChainState:
    """
    Advance one chain by one time step.

    The Wiener increment is sqrt(dr) times a nu x N standard normal draw,
    projected by [a_m]. Passing rng_stream=None integrates without noise.
    """
    _require_reduced(basis)
    dr = config.dr if config.dr is not None else default_dr(kde.s_hat)
    dW = None if rng_stream is None else math.sqrt(dr) * rng_stream.standard_normal((kde.nu, basis.N))
    z, y = _verlet_update(state.z, state.y, kde, basis, config.f0, dr, dW)
    r = state.r + dr
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise DivergenceError(r)
    return ChainState(z, y, r)


@dataclass(frozen=True)
class LearnedSet:
    """
    Retained realizations of [Z_m] and the matching [eta_ar] = [z][g_m]^T.

    Args:
        z_samples (np.ndarray): n_mc x nu x m, ordered by (chain, sample).
        g (np.ndarray): N x m reduced basis used for lifting.
        config (IsdeConfig): Resolved schedule.
        eps_dm (float): Kernel smoothing parameter of the basis.
        kappa (int): Basis exponent.
    """

    z_samples: np.ndarray
    g: np.ndarray
    config: IsdeConfig
    eps_dm: float
    kappa: int

    @property
    def n_mc(self) -> int:
        return self.z_samples.shape[0]

    @property
    def m(self) -> int:
        return self.g.shape[1]

    @property
    def nu(self) -> int:
        return self.z_samples.shape[1]

    @property
    def N(self) -> int:
        return self.g.shape[0]

    @property
    def eta_samples(self) -> np.ndarray:
        """All n_mc x nu x N learned matrices at once."""
        return self.z_samples @ self.g.T

    def iter_eta(self, chunk: int = 4096) -> Iterator[np.ndarray]:
        for start in range(0, self.n_mc, chunk):
            yield self.z_samples[start : start + chunk] @ self.g.T


def generate(eta: NormalizedMatrix, kde: KdeModel, basis: DiffusionBasis, m: int, config: IsdeConfig) -> LearnedSet:
    """
    Run the chains and collect n_mc spaced states after burn-in.

    Args:
        eta (NormalizedMatrix): Whitened training matrix.
        kde (KdeModel): Density model built on eta.
        basis (DiffusionBasis): Solved basis, reduced to m here if needed.
        m (int): Reduction order.
        config (IsdeConfig): Schedule; unset fields take their defaults.

    Returns:
        LearnedSet: Retained states in (chain, sample) order.
    """
    if basis.m != m:
        basis = reduce(basis, m)
    config = config.resolve(kde.s_hat)
    config.validate()
    if (kde.nu, kde.N) != (eta.nu, eta.N) or basis.N != eta.N:
        raise ShapeError("density model, basis and normalized matrix disagree on nu or N")

    counts = config.chain_counts()
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n_steps = config.burn_in_steps + config.spacing_steps * max(counts)
    streams = [chain_rng(config.seed, c) for c in range(config.n_chains)]
    logging.info(
        f"Sampling m={m}: {config.n_chains} chains, {n_steps} steps each, dr={config.dr:.4g}, "
        f"f0={config.f0:g}, burn-in {config.burn_in_steps}, spacing {config.spacing_steps}"
    )

    z = np.broadcast_to(eta.eta_d @ basis.a, (config.n_chains, eta.nu, m)).copy()
    y = np.stack([rng.standard_normal((eta.nu, eta.N)) for rng in streams]) @ basis.a
    samples = np.empty((config.n_mc, eta.nu, m))
    sqrt_dr = math.sqrt(config.dr)
    report_every = max(1, n_steps // 10)

    for k in range(1, n_steps + 1):
        dW = sqrt_dr * np.stack([rng.standard_normal((eta.nu, eta.N)) for rng in streams])
        z, y = _verlet_update(z, y, kde, basis, config.f0, config.dr, dW)
        finite = np.isfinite(z).all(axis=(1, 2)) & np.isfinite(y).all(axis=(1, 2))
        if not finite.all():
            raise DivergenceError(k * config.dr, chain=int(np.flatnonzero(~finite)[0]))
        after = k - config.burn_in_steps
        if after > 0 and after % config.spacing_steps == 0:
            index = after // config.spacing_steps - 1
            for c, count in enumerate(counts):
                if index < count:
                    samples[offsets[c] + index] = z[c]
        if k % report_every == 0:
            logging.debug(f"step {k}/{n_steps}")

    return LearnedSet(samples, basis.g, config, basis.eps_dm, basis.kappa)


def reconstruct_learned(learned: LearnedSet, pca: PcaModel, scaling: ScalingSpec) -> LearnedArchive:
    """
    Map learned matrices back to the original feature space.

    Column l*N + j of the archive is realization j of learned matrix l.
    """
    if learned.nu != pca.nu or pca.n != scaling.n:
        raise ShapeError(
            f"cannot map nu={learned.nu} through a PCA with nu={pca.nu}, n={pca.n} and scaling with n={scaling.n}"
        )
    eta_columns = learned.eta_samples.transpose(1, 0, 2).reshape(learned.nu, learned.n_mc * learned.N)
    samples = invert_scaling(scaling, reconstruct(pca, eta_columns))
    config = learned.config
    metadata = {
        "N": learned.N,
        "nu": learned.nu,
        "m": learned.m,
        "eps_dm": float(learned.eps_dm),
        "kappa": int(learned.kappa),
        "f0": float(config.f0),
        "dr": float(config.dr),
        "seed": int(config.seed),
        "n_mc": int(samples.shape[1]),
        "n_matrices": learned.n_mc,
        "burn_in_steps": config.burn_in_steps,
        "spacing_steps": config.spacing_steps,
        "n_chains": config.n_chains,
        "scaling_mode": scaling.mode,
        "constant_features": scaling.constant_features(),
    }
    return LearnedArchive(samples, metadata)
