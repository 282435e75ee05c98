"""Exception types shared across the package."""


class ExitBsdeError(Exception):
    """Base class for all package errors."""


class InvalidInput(ExitBsdeError, ValueError):
    """An argument fails a documented precondition."""


class CatalogError(ExitBsdeError, KeyError):
    """Unknown benchmark id."""


class DomainError(ExitBsdeError, ValueError):
    """A point lies outside the closed domain."""


class ConfigurationError(ExitBsdeError, ValueError):
    """Inconsistent or unusable configuration."""


class EstimationError(ExitBsdeError, RuntimeError):
    """An estimator has no usable samples."""


class ResolutionError(ExitBsdeError, ValueError):
    """Spatial mesh too coarse for the requested quadrature spread."""


class UnsupportedConfiguration(ExitBsdeError, RuntimeError):
    """The requested computation needs data the inputs do not carry."""


class NonContraction(ExitBsdeError, RuntimeError):
    """Fixed-point iteration failed to contract; declared constants are suspect."""


class FitError(ExitBsdeError, RuntimeError):
    """Too few usable points for a regression fit."""


class StageFailure(ExitBsdeError, RuntimeError):
    """An experiment stage failed; the message names the stage.

    The original error is chained as ``__cause__`` and artifacts
    written before the failure stay on disk.
    """

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"stage {stage!r} failed: {original}")
        self.stage = stage
