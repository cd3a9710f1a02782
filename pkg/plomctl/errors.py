"""Exception hierarchy shared by every plomctl module.

Library code raises these; the command line converts them into
``SystemExit`` with the exit code carried by the exception class.
"""


class PlomError(Exception):
    """Base class for all plomctl failures."""

    exit_code = 1


class ConfigError(PlomError):
    """Invalid configuration, option value or sampling schedule."""

    exit_code = 2


class DataError(PlomError):
    """The input data cannot be used as given."""

    exit_code = 3


class FormatError(DataError):
    """A text file could not be parsed.

    Args:
        message (str): Description of the problem.
        row (int | None): 1-based line number in the file.
        column (int | None): 1-based field number in the line.
    """

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        self.row = row
        self.column = column
        location = ""
        if row is not None:
            location = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{location}")


class DuplicatePointError(DataError):
    """Two realizations are identical, so the kernel matrix is singular."""

    def __init__(self, first: int, second: int):
        self.pair = (first, second)
        super().__init__(
            f"realizations {first} and {second} are identical; remove duplicates before learning"
        )


class ShapeError(DataError):
    """Array dimensions do not agree."""


class DimensionError(DataError):
    """The PCA tolerance cannot be met with fewer components than realizations."""


class NumericalError(PlomError):
    """A numerical stage failed or produced inconsistent values."""

    exit_code = 4


class ConcentrationError(NumericalError):
    """The diffusion kernel matrix is numerically singular."""

    def __init__(self, message: str, pair: tuple[int, int] | None = None, distance: float | None = None):
        self.pair = pair
        self.distance = distance
        if pair is not None:
            message = f"{message} (closest pair ({pair[0]}, {pair[1]}) at distance {distance:.3e})"
        super().__init__(message)


class DivergenceError(NumericalError):
    """A chain state became non-finite during integration."""

    def __init__(self, r: float, chain: int | None = None):
        self.r = r
        self.chain = chain
        where = f" in chain {chain}" if chain is not None else ""
        super().__init__(
            f"non-finite state{where} at pseudo-time r={r:.6g}; retry with a smaller time step dr"
        )


class NonMonotoneError(NumericalError):
    """The m-hat profile over the epsilon grid is not non-increasing."""


class ScanRangeError(NumericalError):
    """No epsilon on the grid satisfies the plateau selection rule."""


class InconsistencyError(NumericalError):
    """A quantity that must be positive by construction is not."""


class ArchiveError(PlomError):
    """Reading or writing an artifact failed."""

    exit_code = 5


class SchemaError(ArchiveError):
    """Archive metadata is missing required fields or has the wrong types."""


class ConsistencyError(ArchiveError):
    """Archive metadata disagrees with the stored payload."""
