"""Exception types shared across the package."""


class HbarlabError(Exception):
    """Base class for all package errors."""


class ConfigError(HbarlabError):
    """Invalid configuration or failed validation budget."""


class UnsupportedOrderError(HbarlabError):
    """A derivative or expansion order beyond what the object supports."""


class CapacityError(HbarlabError):
    """A size cap (memory or solver) was exceeded."""

    def __init__(self, message, required_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes


class DivergenceError(HbarlabError):
    """Non-finite values appeared during time stepping."""

    def __init__(self, message, step=None, t=None):
        super().__init__(message)
        self.step = step
        self.t = t


class DomainError(HbarlabError):
    """Grid domain too small: tail or boundary mass above budget."""


class ResolutionError(ConfigError):
    """Grid too coarse for the requested scale (smoothing width, aliasing)."""


class TimeRangeError(HbarlabError):
    """Requested time outside a stored trajectory."""
