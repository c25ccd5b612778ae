"""
Typed errors for the LiDAR intrinsic-decomposition toolkit.

Two families:
- ValidationError: the input is wrong (bad shapes, empty masks, malformed
  files). The CLI maps these to exit code 1.
- SolverError: a numerical procedure failed on valid input. The CLI maps
  these to exit code 2.
"""

from typing import Optional


class IIDError(Exception):
    """Base class for every error raised by this toolkit."""


class ValidationError(IIDError, ValueError):
    """Input failed validation."""


class SolverError(IIDError, RuntimeError):
    """A numerical procedure failed."""


class ShapeMismatch(ValidationError):
    """Two arrays that must agree in shape do not."""


class EmptyMask(ValidationError):
    """An operation that needs observed pixels got none."""


class EmptyAnnotations(ValidationError):
    """No annotation with positive weight was supplied."""


class MissingClass(ValidationError):
    """A judgement class required by balanced resampling is absent."""


class DegenerateGeometry(ValidationError):
    """Too few points to build any pair."""


class DegenerateVariance(ValidationError):
    """A correlation was requested on a constant marginal."""


class DegenerateFit(ValidationError):
    """A scale/bias fit was requested on a constant source."""


class ConfigError(ValidationError):
    """A configuration file or value is malformed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetError(ValidationError):
    """A dataset file could not be loaded."""


class MissingFileError(DatasetError):
    """A referenced file does not exist."""


class RowError(DatasetError):
    """A problem tied to one row (CSV) or line (JSON lines) of a file."""

    def __init__(self, message: str, row: int, path: str = ""):
        self.row = row
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}row {row}: {message}")


class CoordinateRangeError(RowError):
    """A pixel coordinate lies outside the image."""


class MalformedRowError(RowError):
    """A row could not be parsed."""


class AnnotationFormatError(DatasetError):
    """One or more annotation lines are malformed."""

    def __init__(self, problems: list, path: str = ""):
        self.problems = problems
        self.lines = [line for line, _ in problems]
        details = "; ".join(f"line {line}: {msg}" for line, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        where = f"{path}: " if path else ""
        super().__init__(f"{where}malformed annotation lines: {details}{more}")


class NonConvergence(SolverError):
    """An iterative solver stopped above its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")


class NonFinite(SolverError):
    """An objective evaluated to NaN or infinity."""
