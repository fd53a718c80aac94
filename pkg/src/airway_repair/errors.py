"""Exception hierarchy shared across the package."""


class AirwayRepairError(Exception):
    """Base class for all package errors."""


class FormatError(AirwayRepairError):
    """A file does not follow the supported on-disk format."""


class GeometryError(AirwayRepairError, ValueError):
    """Invalid or mismatched volume geometry."""


class ContractError(AirwayRepairError, ValueError):
    """A documented precondition was violated by the caller."""


class GenerationError(AirwayRepairError):
    """Synthetic data could not be produced with the requested settings."""


class DivergenceError(AirwayRepairError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class UndefinedMetricError(AirwayRepairError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty masks)."""


class BoundsError(AirwayRepairError, IndexError):
    """A sampling path leaves the volume."""


class UnsupportedVersionError(FormatError):
    """A model file declares a format version this build cannot read."""
