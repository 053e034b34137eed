"""Exception taxonomy shared across the package."""


class RetroPagerError(Exception):
    """Base class for all package errors."""


class EmptyInput(RetroPagerError):
    """Raised when a token stream or dataset is empty."""


class InvalidConfig(RetroPagerError):
    """Raised when a configuration value violates a documented constraint."""


class CorruptPages(RetroPagerError):
    """Raised when a page list is inconsistent (duplicate or missing indices)."""


class ShapeError(RetroPagerError):
    """Raised when an array has the wrong shape or dtype for the operation."""


class MissingPage(RetroPagerError):
    """Raised when a requested (layer, page) block is not in the store."""


class NumericalError(RetroPagerError):
    """Raised on NaN/Inf inputs or losses."""


class InvalidSelection(RetroPagerError):
    """Raised when an attention selection is empty or a plan is incomplete."""


class InvalidState(RetroPagerError):
    """Raised when an operation is called out of order (e.g. decode before prefill)."""


class LabelError(RetroPagerError):
    """Raised when a training label is out of range for its sample."""


class InvalidInput(RetroPagerError):
    """Raised when user-supplied data is malformed."""
