"""Exception types raised across the package."""


class SkyMaskError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SkyMaskError, ValueError):
    """Inconsistent shapes, layouts or configuration values."""


class UsageError(SkyMaskError, ValueError):
    """An operation was called with arguments outside its domain."""


class NumericError(SkyMaskError, FloatingPointError):
    """A computation produced non-finite values.

    ``layer`` holds the index of the offending layer when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
