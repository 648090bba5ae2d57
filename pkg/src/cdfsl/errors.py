"""Exception hierarchy shared by every stage."""


class CDFSLError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CDFSLError, ValueError):
    """An input violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(CDFSLError, ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ConsistencyError(CDFSLError):
    """Two collections that must agree (parameter names, head widths) do not."""


class CapacityError(CDFSLError):
    """Not enough classes or clips to satisfy a request."""


class DisjointnessError(ValidationError):
    """Source and target classes (or target clip seeds) overlap."""


class OracleError(CDFSLError):
    """A test oracle cannot be trusted for the function it was handed."""


class TrainingError(CDFSLError):
    """Training diverged or produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class MissingDependencyError(CDFSLError):
    """A pipeline stage needs an artifact that an earlier stage never produced."""
