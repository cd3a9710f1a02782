"""Datasets, scaling and every file format plomctl reads or writes.

Internally a dataset is always an ``n x N`` matrix whose columns are
realizations. CSV files default to the tabular convention (rows are
samples) and are transposed on load.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from plomctl.errors import (
    ArchiveError,
    ConsistencyError,
    DataError,
    DuplicatePointError,
    FormatError,
    SchemaError,
    ShapeError,
)

MAGIC = b"PLOMDAT1"
LAYOUTS = ("rows", "columns")
SCALING_MODES = ("minmax", "standard")
SYNTHETIC_KINDS = ("helix", "ring", "sheet")

# key -> accepted python types
METADATA_SCHEMA: dict[str, tuple[type, ...]] = {
    "N": (int,),
    "nu": (int,),
    "m": (int,),
    "eps_dm": (int, float),
    "kappa": (int,),
    "f0": (int, float),
    "dr": (int, float),
    "seed": (int,),
    "n_mc": (int,),
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def duplicate_pair(points: np.ndarray) -> tuple[int, int] | None:
    """Return the first pair of identical columns, or None."""
    if points.shape[1] < 2:
        return None
    _, inverse, counts = np.unique(points.T, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    repeated = np.flatnonzero(counts > 1)
    if repeated.size == 0:
        return None
    first_group = min(repeated, key=lambda k: np.flatnonzero(inverse == k)[1])
    members = np.flatnonzero(inverse == first_group)
    return int(members[0]), int(members[1])


@dataclass(frozen=True)
class RawDataset:
    """
    A dataset of N realizations of an n-dimensional random vector.

    Args:
        points (np.ndarray): n x N matrix, one realization per column.
        feature_names (tuple[str, ...] | None): Optional label per feature.
    """

    points: np.ndarray
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ShapeError(f"dataset must be a non-empty 2-D matrix, got shape {points.shape}")
        bad = np.argwhere(~np.isfinite(points))
        if bad.size:
            feature, realization = bad[0]
            raise DataError(
                f"non-finite value {points[feature, realization]} at feature {feature}, realization {realization}"
            )
        if self.feature_names is not None:
            names = tuple(str(name) for name in self.feature_names)
            if len(names) != points.shape[0]:
                raise ShapeError(f"{len(names)} feature names for {points.shape[0]} features")
            object.__setattr__(self, "feature_names", names)
        pair = duplicate_pair(points)
        if pair is not None:
            raise DuplicatePointError(*pair)
        object.__setattr__(self, "points", _frozen(points))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def N(self) -> int:
        return self.points.shape[1]


def _parse_float(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def load_dataset(path: str | Path, layout: str = "rows") -> RawDataset:
    """
    Read a numeric CSV file into a RawDataset.

    Args:
        path (str | Path): CSV file, ',' delimited, optional header row.
        layout (str): "rows" when each row is a realization, "columns" when
            each column is one.

    Returns:
        RawDataset: Columns are realizations regardless of layout.
    """
    if layout not in LAYOUTS:
        raise FormatError(f"unknown layout '{layout}', expected one of {', '.join(LAYOUTS)}")
    path = Path(path)
    try:
        with path.open(newline="") as handle:
            lines = [(number, row) for number, row in enumerate(csv.reader(handle), start=1)]
    except OSError as e:
        raise ArchiveError(f"cannot read '{path}': {e}") from e

    lines = [(number, row) for number, row in lines if any(cell.strip() for cell in row)]
    if not lines:
        raise FormatError(f"'{path}' contains no data")

    header = None
    first_number, first_row = lines[0]
    if any(_parse_float(cell) is None for cell in first_row):
        header = tuple(cell.strip() for cell in first_row)
        lines = lines[1:]
        logging.debug(f"Detected header row in '{path}' with {len(header)} fields")

    width = len(header) if header is not None else len(lines[0][1]) if lines else 0
    values = []
    for number, row in lines:
        if len(row) != width:
            raise FormatError(f"expected {width} fields, found {len(row)}", row=number)
        parsed = []
        for column, cell in enumerate(row, start=1):
            value = _parse_float(cell)
            if value is None:
                raise FormatError(f"cannot parse '{cell}' as a number", row=number, column=column)
            if not math.isfinite(value):
                raise DataError(f"non-finite value '{cell}' at row {number}, column {column}")
            parsed.append(value)
        values.append(parsed)

    if not values:
        raise FormatError(f"'{path}' has a header but no data rows")
    matrix = np.array(values, dtype=float)
    if layout == "rows":
        points, names = matrix.T, header
    else:
        points, names = matrix, None
    if points.shape[1] < 2:
        raise ShapeError(f"'{path}' holds {points.shape[1]} realization; at least 2 are required")

    dataset = RawDataset(points, feature_names=names)
    logging.info(f"Loaded '{path}': n={dataset.n} features, N={dataset.N} realizations")
    return dataset


def save_dataset(dataset: RawDataset, path: str | Path, layout: str = "rows", header: bool = True) -> None:
    """Write a RawDataset as CSV with 17 significant digits."""
    if layout not in LAYOUTS:
        raise FormatError(f"unknown layout '{layout}', expected one of {', '.join(LAYOUTS)}")
    matrix = dataset.points.T if layout == "rows" else dataset.points
    names = dataset.feature_names
    if names is None:
        names = tuple(f"x{i + 1}" for i in range(dataset.n))
    try:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            if header and layout == "rows":
                writer.writerow(names)
            for row in matrix:
                writer.writerow([f"{value:.17g}" for value in row])
    except OSError as e:
        raise ArchiveError(f"cannot write '{path}': {e}") from e


def assemble_joint(q_samples, w_samples, feature_names: tuple[str, ...] | None = None) -> RawDataset:
    """
    Stack realizations of Q and W into realizations of X = (Q, W).

    Args:
        q_samples: n_q x N matrix (n_q may be 0).
        w_samples: n_w x N matrix.
        feature_names (tuple[str, ...] | None): Labels for the joint features.

    Returns:
        RawDataset: n_q + n_w features, column j is (q^j, w^j).
    """
    q = np.asarray(q_samples, dtype=float)
    w = np.asarray(w_samples, dtype=float)
    if w.ndim != 2:
        raise ShapeError(f"w samples must be a matrix, got shape {w.shape}")
    if q.size == 0:
        q = q.reshape(0, w.shape[1])
    if q.ndim != 2:
        raise ShapeError(f"q samples must be a matrix, got shape {q.shape}")
    if q.shape[1] != w.shape[1]:
        raise ShapeError(f"q has N={q.shape[1]} realizations but w has N={w.shape[1]}")
    return RawDataset(np.vstack([q, w]), feature_names=feature_names)


def split_joint(raw: RawDataset, n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Split X = (Q, W) back into its q (first n_q rows) and w blocks."""
    if not 0 <= n_q <= raw.n:
        raise ShapeError(f"split boundary {n_q} outside 0..{raw.n}")
    return raw.points[:n_q].copy(), raw.points[n_q:].copy()


@dataclass(frozen=True)
class ScalingSpec:
    """
    Per-feature affine map x -> (x - shift) / scale.

    Args:
        shift (np.ndarray): Length-n shift vector.
        scale (np.ndarray): Length-n strictly positive scale vector.
        mode (str): "minmax" or "standard".
        constant (np.ndarray): Length-n boolean flags for constant features.
    """

    shift: np.ndarray
    scale: np.ndarray
    mode: str = "minmax"
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        shift = np.array(self.shift, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float).reshape(-1)
        if shift.shape != scale.shape:
            raise ShapeError(f"shift has {shift.size} entries but scale has {scale.size}")
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise DataError("scaling factors must be finite and strictly positive")
        if self.mode not in SCALING_MODES:
            raise DataError(f"unknown scaling mode '{self.mode}'")
        constant = np.zeros(shift.size, dtype=bool) if self.constant is None else np.array(self.constant, dtype=bool)
        object.__setattr__(self, "shift", _frozen(shift))
        object.__setattr__(self, "scale", _frozen(scale))
        object.__setattr__(self, "constant", _frozen(constant.reshape(-1)))

    @property
    def n(self) -> int:
        return self.shift.size

    def constant_features(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.constant)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "constant_features": self.constant_features(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ScalingSpec":
        try:
            constant = np.zeros(len(payload["shift"]), dtype=bool)
            constant[list(payload.get("constant_features", []))] = True
            return cls(payload["shift"], payload["scale"], payload.get("mode", "minmax"), constant)
        except (KeyError, TypeError, IndexError) as e:
            raise SchemaError(f"invalid scaling record: {e}") from e


def fit_scaling(raw: RawDataset, mode: str = "minmax") -> ScalingSpec:
    """
    Fit a per-feature scaling on the training realizations.

    Min-max maps each feature onto [0, 1]; standard maps it to zero mean
    and unit sample standard deviation. Constant features get shift equal
    to their value and scale 1, and are flagged.
    """
    if mode not in SCALING_MODES:
        raise DataError(f"unknown scaling mode '{mode}', expected one of {', '.join(SCALING_MODES)}")
    points = raw.points
    if mode == "minmax":
        shift = points.min(axis=1)
        spread = points.max(axis=1) - shift
    else:
        shift = points.mean(axis=1)
        spread = points.std(axis=1, ddof=1) if raw.N > 1 else np.zeros(raw.n)
    constant = spread <= 0
    shift = np.where(constant, points[:, 0], shift)
    scale = np.where(constant, 1.0, spread)
    if constant.any():
        logging.warning(f"Constant features left unscaled: {np.flatnonzero(constant).tolist()}")
    return ScalingSpec(shift, scale, mode, constant)


def _as_matrix(data) -> tuple[np.ndarray, bool]:
    if isinstance(data, RawDataset):
        return data.points, True
    return np.asarray(data, dtype=float), False


def apply_scaling(spec: ScalingSpec, data):
    """Scale a RawDataset or an n x K matrix; returns the same kind."""
    points, wrapped = _as_matrix(data)
    if points.shape[0] != spec.n:
        raise ShapeError(f"scaling fitted on {spec.n} features, data has {points.shape[0]}")
    scaled = (points - spec.shift[:, None]) / spec.scale[:, None]
    if wrapped:
        return RawDataset(scaled, feature_names=data.feature_names)
    return scaled


def invert_scaling(spec: ScalingSpec, data):
    """Undo apply_scaling on a RawDataset or an n x K matrix."""
    points, wrapped = _as_matrix(data)
    if points.shape[0] != spec.n:
        raise ShapeError(f"scaling fitted on {spec.n} features, data has {points.shape[0]}")
    restored = points * spec.scale[:, None] + spec.shift[:, None]
    if wrapped:
        return RawDataset(restored, feature_names=data.feature_names)
    return restored


def save_matrix(path: str | Path, matrix) -> None:
    """Write a matrix as magic, u64 rows, u64 cols, then column-major <f8 payload."""
    array = np.asarray(matrix, dtype="<f8")
    if array.ndim != 2:
        raise ShapeError(f"only 2-D matrices can be archived, got shape {array.shape}")
    header = np.array(array.shape, dtype="<u8").tobytes()
    try:
        with Path(path).open("wb") as handle:
            handle.write(MAGIC)
            handle.write(header)
            handle.write(array.tobytes(order="F"))
    except OSError as e:
        raise ArchiveError(f"cannot write '{path}': {e}") from e


def load_matrix(path: str | Path) -> np.ndarray:
    """Read a matrix written by save_matrix."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read '{path}': {e}") from e
    if data[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"'{path}' is not a plomctl matrix archive")
    if len(data) < len(MAGIC) + 16:
        raise ArchiveError(f"'{path}' is truncated: {len(data)} bytes is shorter than the archive header")
    rows, cols = (int(v) for v in np.frombuffer(data, dtype="<u8", count=2, offset=len(MAGIC)))
    offset = len(MAGIC) + 16
    if len(data) - offset != rows * cols * 8:
        raise ConsistencyError(
            f"'{path}' declares {rows}x{cols} values but holds {(len(data) - offset) // 8}"
        )
    payload = np.frombuffer(data, dtype="<f8", offset=offset)
    return payload.reshape((rows, cols), order="F").astype(float)


def write_json(path: str | Path, payload: dict[str, Any]) -> None:
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise ArchiveError(f"cannot write '{path}': {e}") from e


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ArchiveError(f"cannot read '{path}': {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"'{path}' is not valid JSON: {e}") from e


def sidecar_path(path: str | Path) -> Path:
    """learned_m10.bin -> learned_m10.meta.json"""
    return Path(path).with_suffix(".meta.json")


def validate_metadata(metadata: dict[str, Any], n_columns: int) -> None:
    """Check required archive keys, their types, and n_mc against the payload."""
    missing = [key for key in METADATA_SCHEMA if key not in metadata]
    if missing:
        raise SchemaError(f"archive metadata is missing: {', '.join(missing)}")
    for key, kinds in METADATA_SCHEMA.items():
        value = metadata[key]
        if isinstance(value, bool) or not isinstance(value, kinds):
            raise SchemaError(f"metadata field '{key}' has type {type(value).__name__}")
    if metadata["n_mc"] != n_columns:
        raise ConsistencyError(
            f"metadata declares n_mc={metadata['n_mc']} but the archive holds {n_columns} realizations"
        )


@dataclass(frozen=True)
class LearnedArchive:
    """
    Learned realizations mapped back to the original feature space.

    Args:
        samples (np.ndarray): n x n_mc matrix of learned realizations.
        metadata (dict): Run parameters, see METADATA_SCHEMA.
    """

    samples: np.ndarray
    metadata: dict[str, Any]

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim != 2:
            raise ShapeError(f"archive samples must be a matrix, got shape {samples.shape}")
        validate_metadata(self.metadata, samples.shape[1])
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n_mc(self) -> int:
        return self.samples.shape[1]


def save_learned(archive: LearnedArchive, path: str | Path) -> Path:
    """Write the samples archive and its JSON sidecar; returns the sidecar path."""
    save_matrix(path, archive.samples)
    meta_path = sidecar_path(path)
    write_json(meta_path, archive.metadata)
    logging.info(f"Wrote {archive.n_mc} learned realizations to '{path}'")
    return meta_path


def load_learned(path: str | Path) -> LearnedArchive:
    samples = load_matrix(path)
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise SchemaError(f"metadata sidecar '{meta_path}' not found")
    return LearnedArchive(samples, read_json(meta_path))


def save_table(path: str | Path, columns: dict[str, Any]) -> None:
    """Write equally long named columns as CSV with 17 significant digits."""
    names = list(columns)
    arrays = [np.asarray(columns[name], dtype=float).reshape(-1) for name in names]
    lengths = {array.size for array in arrays}
    if len(lengths) > 1:
        raise ShapeError(f"table columns have different lengths: {sorted(lengths)}")
    try:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(names)
            for row in zip(*arrays):
                writer.writerow([f"{value:.17g}" for value in row])
    except OSError as e:
        raise ArchiveError(f"cannot write '{path}': {e}") from e


def load_table(path: str | Path) -> dict[str, np.ndarray]:
    try:
        with Path(path).open(newline="") as handle:
            rows = list(csv.reader(handle))
    except OSError as e:
        raise ArchiveError(f"cannot read '{path}': {e}") from e
    if not rows:
        raise FormatError(f"'{path}' is empty")
    names, body = rows[0], rows[1:]
    values = np.empty((len(body), len(names)), dtype=float)
    for i, row in enumerate(body):
        if len(row) != len(names):
            raise FormatError(f"'{path}' has {len(row)} fields where the header names {len(names)}", i + 2)
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError as e:
                raise FormatError(f"'{path}' holds non-numeric value '{cell}'", i + 2, j + 1) from e
    return {name: values[:, i] for i, name in enumerate(names)}


def synthetic_dataset(kind: str, N: int, n: int = 3, seed: int = 0, noise: float = 0.0) -> RawDataset:
    """
    Draw N points concentrated on a low-dimensional manifold.

    helix and ring are curves, sheet is a curved surface; all live in R^3
    and are rotated into R^n by a fixed random orthogonal map when n > 3.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic dataset '{kind}', expected one of {', '.join(SYNTHETIC_KINDS)}")
    if n < 3:
        raise ShapeError("synthetic datasets need n >= 3")
    rng = np.random.default_rng(seed)
    if kind == "helix":
        t = rng.uniform(0.0, 4.0 * np.pi, N)
        base = np.vstack([np.cos(t), np.sin(t), t / (2.0 * np.pi)])
    elif kind == "ring":
        t = rng.uniform(0.0, 2.0 * np.pi, N)
        base = np.vstack([np.cos(t), np.sin(t), 0.3 * np.sin(3.0 * t)])
    else:
        u, v = rng.uniform(-1.0, 1.0, (2, N))
        base = np.vstack([u, v, 0.5 * (u**2 - v**2)])
    if noise > 0:
        base = base + noise * rng.standard_normal(base.shape)
    if n > 3:
        rotation, _ = np.linalg.qr(rng.standard_normal((n, n)))
        base = rotation[:, :3] @ base
    names = tuple(f"{kind}_{i + 1}" for i in range(n))
    return RawDataset(base, feature_names=names)
