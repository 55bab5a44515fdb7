"""Exception types shared across the pipeline."""


class DavError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DavError, ValueError):
    pass


class DimensionError(DavError, ValueError):
    pass


class PoseError(DavError, ValueError):
    pass


class IntegrityError(DavError, ValueError):
    pass


class BudgetError(DavError, ValueError):
    pass


class RefinementError(DavError, RuntimeError):
    """Raised when bounded refinement produces a non-finite loss.

    The field passed to the refinement is left untouched; ``diagnostic``
    carries the iteration and parameter group that blew up.
    """

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class TilingError(DavError, RuntimeError):
    def __init__(self, message: str, cell: tuple[int, int] | None = None):
        super().__init__(message)
        self.cell = cell


class LoopAborted(DavError, RuntimeError):
    """The active loop stopped early; the partial result rides along."""

    def __init__(self, message: str, field, trace):
        super().__init__(message)
        self.field = field
        self.trace = trace
