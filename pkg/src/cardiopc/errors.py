"""Exception hierarchy.

Every error raised deliberately by this package derives from CardioPCError so
callers can catch one type at pipeline boundaries. Subclasses map to the
failure domains of the individual stages.
"""


class CardioPCError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(CardioPCError, ValueError):
    """An argument failed validation (shape, dtype, range, finiteness)."""


class ConfigError(CardioPCError):
    """A configuration file is missing, malformed, or inconsistent."""


class DegenerateModelError(CardioPCError):
    """Shape model parameters produce a degenerate or non-physical anatomy."""


class InvalidAnatomyError(CardioPCError):
    """A sampled anatomy violates containment or volume plausibility checks."""


class SlicingError(CardioPCError):
    """A slice plane could not produce a usable contour."""


class InvalidContourError(CardioPCError):
    """A contour is too short, self-intersecting, or otherwise unusable."""


class FitFailureError(CardioPCError):
    """Spline fitting failed or exceeded its residual tolerance."""


class InvalidSampleError(CardioPCError):
    """A dataset sample is incomplete or fails class-coverage checks."""


class SplitError(CardioPCError):
    """The dataset is too small to honor the requested split fractions."""


class ShapeError(CardioPCError, ValueError):
    """A tensor has the wrong shape for the requested network operation."""


class NumericalError(CardioPCError):
    """Training diverged or a computation produced non-finite values.

    Carries the last finite parameter state so callers can checkpoint it.
    """

    def __init__(self, message: str, last_good=None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class CompatibilityError(CardioPCError):
    """A checkpoint or artifact is incompatible with the current code/config."""


class MeshingFailureError(CardioPCError):
    """All meshing attempts failed topology validation.

    Carries the per-attempt reports so callers can log what was tried.
    """

    def __init__(self, message: str, attempts: list | None = None):
        super().__init__(message)
        self.attempts = attempts or []


class InvalidTopologyError(CardioPCError):
    """A mesh violates the topology expected for its anatomical class."""


class MissingInputError(CardioPCError):
    """An input file or directory a command depends on does not exist."""


class PairingError(CardioPCError):
    """Too many evaluation samples lack a matching counterpart."""


class StageFailure(CardioPCError):
    """A pipeline stage aborted; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
