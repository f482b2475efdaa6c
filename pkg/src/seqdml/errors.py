"""Exception hierarchy shared across the package."""


class SeqdmlError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SeqdmlError, ValueError):
    """A parameter is outside its valid range."""


class NuisanceError(SeqdmlError):
    """An evaluated nuisance value violates its required range or is missing."""


class EstimandError(SeqdmlError):
    """Data does not match the requested estimand (e.g. missing instrument)."""


class IdentificationError(SeqdmlError):
    """The empirical Jacobian is (numerically) singular; the solve aborts."""

    def __init__(self, message: str, smallest_singular_value: float | None = None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class FitError(SeqdmlError):
    """A nuisance model could not be fit."""


class IngestError(SeqdmlError):
    """An observation does not match the stream's schema."""


class NotReadyError(SeqdmlError):
    """The stream cannot produce output yet (burn-in, degenerate folds)."""


class SyncError(SeqdmlError):
    """Two streams that must be aligned are at different sample sizes."""


class DgpError(SeqdmlError):
    """A finite-support distribution produced non-finite expectations."""
