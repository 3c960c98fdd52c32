"""V2G scheduling errors."""
from pathlib import Path
from typing import Optional, Union


class V2GError(Exception):
    """Base class for all scheduling errors."""


class InvalidInputError(V2GError, ValueError):
    """Value outside of its domain (sign, length, finiteness)."""


class NoDataError(InvalidInputError):
    """No charging sessions to estimate from."""


class SingularModelError(InvalidInputError):
    """Energy regression has no positive stay duration."""


class InvalidForecastError(InvalidInputError):
    """Predicted charging window is empty or reversed."""


class InfeasibleDemand(V2GError):
    """Energy demand does not fit the charging window capacity."""


class DataFormatError(V2GError):
    """Input file rejected at a given data row."""

    def __init__(
        self, message: str, path: Union[str, Path], row: Optional[int] = None
    ):
        self.path = Path(path)
        self.row = row
        location = f"{self.path}" if row is None else f"{self.path}, row {row}"
        super().__init__(f"{location}: {message}")


class ArtifactWriteError(V2GError, OSError):
    """Output directory could not be written."""


class ConstraintViolation(V2GError):
    """Published profile leaves its rate bounds or misses its energy demand."""
