"""
Run configuration, pipeline stages and the command-line subcommands.

Settings are layered: defaults < config file < PLOM_* environment < flags.
Every stage writes its artifacts into the output directory and records them
in manifest.json together with the resolved settings.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import click
import numpy as np
from dotenv import dotenv_values

from plomctl import __version__
from plomctl.dataset_io import (
    LAYOUTS,
    SCALING_MODES,
    SYNTHETIC_KINDS,
    RawDataset,
    ScalingSpec,
    apply_scaling,
    fit_scaling,
    load_dataset,
    load_matrix,
    save_dataset,
    save_learned,
    save_matrix,
    save_table,
    synthetic_dataset,
    write_json,
)
from plomctl.diagnostics import ConcentrationCurves, build_curves, concentration_report
from plomctl.diffusion_maps import (
    DiffusionBasis,
    EpsilonSelection,
    build_kernel,
    default_eps_grid,
    m_hat,
    reduce,
    select_eps_m,
    solve_basis,
)
from plomctl.errors import ArchiveError, ConfigError, PlomError
from plomctl.isde_sampler import IsdeConfig, LearnedSet, generate, reconstruct_learned
from plomctl.kde import KdeModel, fit_kde
from plomctl.mixture_oracle import (
    DEFAULT_CAP,
    closed_form_moments,
    enumerate_mixture,
    exact_dsq,
    exact_g_bar,
    h_d,
    verify_sum_identities,
)
from plomctl.pca import NormalizedMatrix, PcaModel, fit_pca, normalize

ENV_PREFIX = "PLOM_"
FAILED_MARKER = "FAILED"


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parser(text: str):
        return None if str(text).strip().lower() in ("", "none", "auto") else parse(text)

    return parser


def _auto_or(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parser(text: str):
        return "auto" if str(text).strip().lower() == "auto" else parse(text)

    return parser


def _order(text: str):
    value = str(text).strip()
    if value.lower() == "auto":
        return "auto"
    if value.upper() == "N":
        return "N"
    return int(value)


def _sim_tokens(text: str) -> list[str | int]:
    """Parse a sim_m list: 'all', or comma-separated orders, 'opt', 'auto' and 'N'."""
    tokens = [token.strip() for token in str(text).split(",") if token.strip()]
    if not tokens:
        raise ConfigError("sim_m must name at least one order")
    if "all" in (token.lower() for token in tokens):
        if len(tokens) > 1:
            raise ConfigError(f"sim_m 'all' cannot be combined with other orders, got '{text}'")
        return ["all"]
    orders: list[str | int] = []
    for token in tokens:
        if token.lower() == "opt":
            orders.append("opt")
            continue
        try:
            order = _order(token)
        except ValueError as e:
            raise ConfigError(f"sim_m entry '{token}' is not an order, 'opt', 'auto', 'N' or 'all'") from e
        if isinstance(order, int) and order < 1:
            raise ConfigError(f"sim_m orders must be at least 1, got {order}")
        orders.append(order)
    return orders


@dataclass(frozen=True)
class RunConfig:
    """
    Every setting of a run, with its default.

    eps_dm and m accept "auto"; m also accepts "N" (no reduction).
    sim_m lists the orders sampled by learn: integers, "opt", "N" or "all".
    """

    input_path: str | None = None
    layout: str = "rows"
    scaling: str = "minmax"
    eps_tol: float = 1e-6
    kappa: int = 1
    eps_dm: float | str = "auto"
    eps_grid_points: int = 24
    eps_grid_low: float = 0.1
    eps_grid_high: float = 100.0
    threshold: float = 0.1
    m: int | str = "auto"
    sim_m: str = "opt,N"
    f0: float = 1.5
    dr: float | None = None
    burn_in: int | None = None
    spacing: int | None = None
    chains: int = 8
    n_mc: int = 100
    seed: int = 0
    output_dir: str = "plom_out"

    def validate(self) -> "RunConfig":
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {', '.join(LAYOUTS)}, got '{self.layout}'")
        if self.scaling not in SCALING_MODES:
            raise ConfigError(f"scaling must be one of {', '.join(SCALING_MODES)}, got '{self.scaling}'")
        if not 0 < self.eps_tol < 1:
            raise ConfigError(f"eps_tol must lie in (0, 1), got {self.eps_tol}")
        if self.kappa < 0:
            raise ConfigError(f"kappa must be >= 0, got {self.kappa}")
        if self.eps_dm != "auto" and not self.eps_dm > 0:
            raise ConfigError(f"eps_dm must be positive or 'auto', got {self.eps_dm}")
        if self.n_mc < 1:
            raise ConfigError(f"n_mc must be at least 1, got {self.n_mc}; there is nothing to generate")
        if self.chains < 1:
            raise ConfigError(f"chains must be at least 1, got {self.chains}")
        _sim_tokens(self.sim_m)
        return self

    def isde_config(self) -> IsdeConfig:
        return IsdeConfig(
            n_mc=self.n_mc,
            seed=self.seed,
            f0=self.f0,
            dr=self.dr,
            burn_in_steps=self.burn_in,
            spacing_steps=self.spacing,
            n_chains=self.chains,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FIELD_PARSERS: dict[str, Callable[[str], Any]] = {
    "input_path": str,
    "layout": str,
    "scaling": str,
    "eps_tol": float,
    "kappa": int,
    "eps_dm": _auto_or(float),
    "eps_grid_points": int,
    "eps_grid_low": float,
    "eps_grid_high": float,
    "threshold": float,
    "m": _order,
    "sim_m": str,
    "f0": float,
    "dr": _optional(float),
    "burn_in": _optional(int),
    "spacing": _optional(int),
    "chains": int,
    "n_mc": int,
    "seed": int,
    "output_dir": str,
}


def _parse_field(name: str, text: str, source: str) -> Any:
    try:
        return FIELD_PARSERS[name](text)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value '{text}' for '{name}' in {source}") from e


def load_run_config(config_path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Resolve a RunConfig from defaults, a key=value file, PLOM_* variables and flags.

    Args:
        config_path (str | Path | None): Flat key=value file (dotenv syntax).
        overrides (dict[str, Any] | None): Already-typed values from the
            command line; None entries are ignored.

    Returns:
        RunConfig: Fully resolved and validated settings.
    """
    values: dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file '{path}' does not exist")
        for key, text in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in FIELD_PARSERS:
                raise ConfigError(f"unknown setting '{key}' in '{path}'")
            if text is not None:
                values[name] = _parse_field(name, text, f"'{path}'")
    for name in FIELD_PARSERS:
        variable = ENV_PREFIX + name.upper()
        if variable in os.environ:
            values[name] = _parse_field(name, os.environ[variable], f"${variable}")
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in FIELD_PARSERS:
            raise ConfigError(f"unknown setting '{name}'")
        values[name] = _parse_field(name, value, "the command line") if isinstance(value, str) else value
    return RunConfig(**values).validate()


@dataclass
class RunManifest:
    """Resolved settings, derived quantities, artifacts and timings of one run."""

    command: str
    config: dict[str, Any]
    version: str = __version__
    derived: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def write(self, output_dir: Path) -> Path:
        path = output_dir / "manifest.json"
        write_json(path, self.to_dict())
        return path


@dataclass(frozen=True)
class FitResult:
    raw: RawDataset
    scaling: ScalingSpec
    pca: PcaModel
    eta: NormalizedMatrix
    kde: KdeModel


@dataclass(frozen=True)
class BasisResult:
    eps_dm: float
    basis: DiffusionBasis
    m_opt: int
    selection: EpsilonSelection | None = None


class Run:
    """Executes stages for one command and keeps the manifest current."""

    def __init__(self, command: str, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.manifest = RunManifest(command, config.to_dict())

    def _record(self, name: str, path: Path) -> Path:
        self.manifest.artifacts[name] = str(path)
        return path

    def _timed(self, stage: str, func: Callable[[], Any]) -> Any:
        start = time.perf_counter()
        logging.info(f"Stage '{stage}' started")
        result = func()
        self.manifest.timings[stage] = round(time.perf_counter() - start, 6)
        logging.info(f"Stage '{stage}' finished in {self.manifest.timings[stage]:.2f}s")
        return result

    def fit(self) -> FitResult:
        return self._timed("fit", self._fit)

    def _fit(self) -> FitResult:
        config = self.config
        if config.input_path is None:
            raise ConfigError("no input dataset given; use --input or input_path in the config file")
        if not Path(config.input_path).is_file():
            raise ConfigError(f"input file '{config.input_path}' does not exist")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        raw = load_dataset(config.input_path, config.layout)
        scaling = fit_scaling(raw, config.scaling)
        scaled = apply_scaling(scaling, raw)
        pca = fit_pca(scaled, config.eps_tol)
        eta = normalize(pca, scaled)
        kde = fit_kde(eta)

        write_json(self._record("scaling", self.output_dir / "scaling.json"), scaling.to_dict())
        write_json(self._record("pca", self.output_dir / "pca.json"), pca.to_dict())
        save_matrix(self._record("eta_d", self.output_dir / "eta_d.bin"), eta.eta_d)
        write_json(self._record("kde", self.output_dir / "kde.json"), kde.to_dict())
        self.manifest.derived.update(
            {
                "N": raw.N,
                "n": raw.n,
                "nu": pca.nu,
                "err_pca": pca.err_pca,
                "s": kde.s,
                "s_hat": kde.s_hat,
                "constant_features": scaling.constant_features(),
            }
        )
        return FitResult(raw, scaling, pca, eta, kde)

    def basis(self, fit: FitResult) -> BasisResult:
        return self._timed("basis", lambda: self._basis(fit))

    def _basis(self, fit: FitResult) -> BasisResult:
        config = self.config
        eta = fit.eta
        selection = None
        if config.eps_dm == "auto":
            grid = default_eps_grid(eta, config.eps_grid_points, config.eps_grid_low, config.eps_grid_high)
            selection = select_eps_m(eta, grid, config.threshold)
            eps_dm, m_opt = selection.eps_opt, selection.m_opt
            save_table(self._record("mhat_table", self.output_dir / "mhat_table.csv"), selection.table())
            self.manifest.derived["eps_grid"] = "geometric grid points; plateau checked on grid points in (eps, 1.5 eps]; plateaus with a singular kernel skipped"
            self.manifest.derived["eigenvalue_gap_ratio"] = selection.gap_ratio
        else:
            eps_dm = float(config.eps_dm)
            m_opt = m_hat(eta, eps_dm, config.threshold)
        basis = solve_basis(build_kernel(eta, eps_dm), config.kappa)
        if selection is None:
            values = basis.eigenvalues
            save_table(
                self._record("mhat_table", self.output_dir / "mhat_table.csv"),
                {
                    "eps": np.array([eps_dm]),
                    "mhat": np.array([m_opt]),
                    "lambda_2": np.array([values[1] if values.size > 1 else np.nan]),
                    "lambda_mhat": np.array([values[m_opt - 1]]),
                },
            )
        save_table(
            self._record("spectrum", self.output_dir / "spectrum.csv"),
            {"alpha": np.arange(1, basis.N + 1), "lambda": basis.eigenvalues},
        )
        self.manifest.derived.update(
            {"eps_opt": eps_dm, "m_opt": m_opt, "lambda_head": basis.eigenvalues[: min(basis.N, 12)].tolist()}
        )
        return BasisResult(eps_dm, basis, m_opt, selection)

    def resolve_order(self, value: int | str, fit: FitResult, basis: BasisResult) -> int:
        if value == "auto" or value == "opt":
            return basis.m_opt
        if value == "N":
            return fit.eta.N
        m = int(value)
        if not 1 <= m <= fit.eta.N:
            raise ConfigError(f"order m must lie in 1..{fit.eta.N}, got {m}")
        return m

    def sample(self, fit: FitResult, basis: BasisResult, m: int) -> LearnedSet:
        return self._timed(f"sample_m{m}", lambda: self._sample(fit, basis, m))

    def _sample(self, fit: FitResult, basis: BasisResult, m: int) -> LearnedSet:
        learned = generate(fit.eta, fit.kde, reduce(basis.basis, m), m, self.config.isde_config())
        archive = reconstruct_learned(learned, fit.pca, fit.scaling)
        save_learned(archive, self._record(f"learned_m{m}", self.output_dir / f"learned_m{m}.bin"))
        eta_columns = learned.eta_samples.transpose(1, 0, 2).reshape(learned.nu, -1)
        save_matrix(self._record(f"eta_ar_m{m}", self.output_dir / f"eta_ar_m{m}.bin"), eta_columns)
        resolved = learned.config
        self.manifest.derived["isde"] = {
            "dr": resolved.dr,
            "burn_in_steps": resolved.burn_in_steps,
            "spacing_steps": resolved.spacing_steps,
        }
        return learned

    def load_learned_set(self, fit: FitResult, basis: BasisResult, m: int) -> LearnedSet:
        """Rebuild a LearnedSet from eta_ar_m<m>.bin written by a previous sample run."""
        path = self.output_dir / f"eta_ar_m{m}.bin"
        if not path.is_file():
            raise ArchiveError(f"'{path}' not found; run 'plomctl sample --m {m}' first")
        columns = load_matrix(path)
        N, nu = fit.eta.N, fit.eta.nu
        if columns.shape[0] != nu or columns.shape[1] % N:
            raise ArchiveError(f"'{path}' has shape {columns.shape}, incompatible with nu={nu}, N={N}")
        reduced = reduce(basis.basis, m)
        eta_samples = columns.reshape(nu, -1, N).transpose(1, 0, 2)
        config = self.config.isde_config().resolve(fit.kde.s_hat)
        config = dataclasses.replace(config, n_mc=eta_samples.shape[0])
        return LearnedSet(eta_samples @ reduced.a, reduced.g, config, basis.eps_dm, basis.basis.kappa)

    def sim_orders(self, fit: FitResult, basis: BasisResult) -> list[int]:
        orders = _sim_tokens(self.config.sim_m)
        if orders == ["all"]:
            return list(range(1, fit.eta.N + 1))
        return sorted({self.resolve_order(order, fit, basis) for order in orders})

    def diagnose(self, fit: FitResult, basis: BasisResult, learned_sets: dict[int, LearnedSet]) -> ConcentrationCurves:
        return self._timed("diagnose", lambda: self._diagnose(fit, basis, learned_sets))

    def _diagnose(self, fit: FitResult, basis: BasisResult, learned_sets: dict[int, LearnedSet]) -> ConcentrationCurves:
        curves = build_curves(fit.eta, basis.basis, learned_sets, basis.m_opt)
        save_table(self._record("curves", self.output_dir / "curves.csv"), curves.to_table())
        summary = concentration_report(curves, basis.eps_dm)
        write_json(self._record("summary", self.output_dir / "summary.json"), summary)
        return curves

    def finish(self) -> Path:
        return self.manifest.write(self.output_dir)


def run_options(func):
    """Options shared by every pipeline subcommand."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Key=value settings file."),
        click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), help="Training dataset (CSV)."),
        click.option("--layout", type=click.Choice(LAYOUTS), help="rows: one realization per row; columns: per column."),
        click.option("--scaling", type=click.Choice(SCALING_MODES), help="Per-feature scaling."),
        click.option("--eps-tol", type=float, help="PCA relative error tolerance."),
        click.option("--kappa", type=int, help="Diffusion-maps eigenvalue exponent."),
        click.option("--eps-dm", type=str, help="Kernel smoothing parameter or 'auto'."),
        click.option("--threshold", type=float, help="Eigenvalue ratio threshold for m-hat."),
        click.option("--m", "m", type=str, help="Reduction order, 'auto' or 'N'."),
        click.option("--sim-m", type=str, help="Orders sampled by learn: integers, 'opt', 'N' or 'all'."),
        click.option("--n-mc", type=int, help="Learned matrices per sampled order."),
        click.option("--f0", type=float, help="Dissipation parameter."),
        click.option("--dr", type=float, help="Integration time step."),
        click.option("--burn-in", type=int, help="Discarded steps per chain."),
        click.option("--spacing", type=int, help="Steps between retained states."),
        click.option("--chains", type=int, help="Number of independent chains."),
        click.option("--seed", type=int, help="Root random seed."),
        click.option("--output-dir", type=click.Path(file_okay=False), help="Artifact directory."),
        click.option("--manifest-only", is_flag=True, help="Print the resolved settings and exit."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _config_from_options(options: dict[str, Any]) -> tuple[RunConfig, bool]:
    options = dict(options)
    manifest_only = options.pop("manifest_only", False)
    config_path = options.pop("config_path", None)
    return load_run_config(config_path, options), manifest_only


def _fail(error: PlomError, output_dir: Path | None = None) -> None:
    message = f"❌ {type(error).__name__}: {error}"
    logging.error(message)
    click.echo(message, err=True)
    if output_dir is not None and output_dir.is_dir():
        (output_dir / FAILED_MARKER).write_text(f"{type(error).__name__}: {error}\n")
    raise SystemExit(error.exit_code)


def _execute(command: str, options: dict[str, Any], body: Callable[[Run], str], mark_failure: bool = False) -> None:
    try:
        config, manifest_only = _config_from_options(options)
    except PlomError as e:
        _fail(e)
    if manifest_only:
        click.echo(json.dumps(RunManifest(command, config.to_dict()).to_dict(), indent=2, sort_keys=True))
        return
    run = Run(command, config)
    try:
        message = body(run)
        path = run.finish()
    except PlomError as e:
        if mark_failure:
            run.manifest.derived["failed"] = f"{type(e).__name__}: {e}"
            try:
                run.finish()
            except PlomError:
                pass
        _fail(e, run.output_dir if mark_failure else None)
    except Exception as e:
        click.echo(f"❌ An unexpected error occurred: {str(e)}", err=True)
        raise SystemExit(1)
    click.echo(f"✅ {message}")
    click.echo(f"ℹ️ Manifest written to '{path}'")


@click.command()
@run_options
def fit(**options) -> None:
    """
    Scale, reduce by PCA and fit the density model.
    """

    def body(run: Run) -> str:
        result = run.fit()
        return f"Fitted nu={result.pca.nu}, s={result.kde.s:.3f}, s_hat={result.kde.s_hat:.3f}"

    _execute("fit", options, body)


@click.command()
@run_options
def basis(**options) -> None:
    """
    Select (eps_opt, m_opt) and write the diffusion spectrum.
    """

    def body(run: Run) -> str:
        result = run.basis(run.fit())
        return f"Selected eps_opt={result.eps_dm:.6g}, m_opt={result.m_opt}"

    _execute("basis", options, body)


@click.command()
@run_options
def sample(**options) -> None:
    """
    Generate a learned dataset at one reduction order.
    """

    def body(run: Run) -> str:
        fit_result = run.fit()
        basis_result = run.basis(fit_result)
        m = run.resolve_order(run.config.m, fit_result, basis_result)
        learned = run.sample(fit_result, basis_result, m)
        return f"Generated {learned.n_mc} learned matrices at m={m}"

    _execute("sample", options, body)


@click.command()
@run_options
def diagnose(**options) -> None:
    """
    Write the concentration curves and summary from earlier sample runs.
    """

    def body(run: Run) -> str:
        fit_result = run.fit()
        basis_result = run.basis(fit_result)
        learned_sets = {}
        for m in run.sim_orders(fit_result, basis_result):
            if (run.output_dir / f"eta_ar_m{m}.bin").is_file():
                learned_sets[m] = run.load_learned_set(fit_result, basis_result, m)
            else:
                logging.warning(f"No learned samples for m={m}; d_sim left empty")
        run.diagnose(fit_result, basis_result, learned_sets)
        return f"Wrote concentration curves for m=1..{fit_result.eta.N}"

    _execute("diagnose", options, body)


@click.command()
@run_options
def learn(**options) -> None:
    """
    Run fit, basis, sample and diagnose end to end.
    """

    def body(run: Run) -> str:
        fit_result = run.fit()
        basis_result = run.basis(fit_result)
        orders = set(run.sim_orders(fit_result, basis_result))
        orders.add(run.resolve_order(run.config.m, fit_result, basis_result))
        learned_sets = {m: run.sample(fit_result, basis_result, m) for m in sorted(orders)}
        curves = run.diagnose(fit_result, basis_result, learned_sets)
        m_opt = basis_result.m_opt
        value = curves.d_sim[m_opt - 1] if curves.d_sim is not None else float("nan")
        return f"Learned m={sorted(orders)}; d_sim(m_opt={m_opt}) = {value:.4f}"

    _execute("learn", options, body, mark_failure=True)


@click.command(hidden=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--layout", type=click.Choice(LAYOUTS), default="rows")
@click.option("--eps-dm", type=float, required=True, help="Kernel smoothing parameter.")
@click.option("--kappa", type=int, default=1)
@click.option("--cap", type=int, default=DEFAULT_CAP, help="Largest N to enumerate.")
def oracle(input_path: str, layout: str, eps_dm: float, kappa: int, cap: int) -> None:
    """
    Print exact mixture constants for a tiny already-normalized dataset.
    """
    try:
        eta = NormalizedMatrix(load_dataset(input_path, layout).points)
        full = solve_basis(build_kernel(eta, eps_dm), kappa)
        rows = []
        for m in range(1, eta.N + 1):
            mixture = enumerate_mixture(eta, full, m, cap)
            mean, second = closed_form_moments(eta, full, m, mixture)
            rows.append(
                {
                    "m": m,
                    "mean": mean.tolist(),
                    "second_moment": second,
                    "d2": exact_dsq(eta, full, m, mixture),
                    "h_d": h_d(eta, full, m, mixture),
                    "g_bar": exact_g_bar(eta, full, m, mixture),
                }
            )
        identities = verify_sum_identities(eta, cap)
    except PlomError as e:
        _fail(e)
    payload = {"eps_dm": eps_dm, "kappa": kappa, "orders": rows, "sum_identity_residual": identities.max_residual}
    click.echo(json.dumps(payload, indent=2))


@click.command()
@click.option("--kind", type=click.Choice(SYNTHETIC_KINDS), required=True, help="Manifold shape.")
@click.option("--realizations", "N", type=int, default=200, show_default=True, help="Number of realizations N.")
@click.option("--features", "n", type=int, default=3, show_default=True, help="Ambient dimension n.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), required=True, help="CSV file to write.")
def synth(kind: str, N: int, n: int, seed: int, noise: float, output: str) -> None:
    """
    Write a synthetic manifold dataset as CSV (one realization per row).
    """
    try:
        dataset = synthetic_dataset(kind, N, n, seed, noise)
        save_dataset(dataset, output)
    except PlomError as e:
        _fail(e)
    click.echo(f"✅ Wrote {kind} dataset with N={N}, n={n} to '{output}'")
