"""
Error hierarchy for the holoflow engine.

Library code raises these; the CLI maps them to exit codes
(ConfigurationError -> 2, everything else -> 1).
"""


class HoloflowError(Exception):
    """Base class for all engine errors."""


class RejectedInputError(HoloflowError, ValueError):
    """Input violates a precondition (non-finite samples, bad shape, out-of-range z, ...)."""


class NoFocusFoundError(HoloflowError):
    """Autofocus metric is flat over the whole search interval."""


class WarmupRequiredError(HoloflowError):
    """Background model has no buffered frames yet."""


class ConfigurationError(HoloflowError, ValueError):
    """Invalid configuration (singular unmixing matrix, unreadable config file, ...)."""


class CorruptFrameError(HoloflowError):
    """Frame payload does not match the stream manifest."""


class ManifestError(HoloflowError):
    """Stream manifest or run report is missing or unreadable."""


class UnsupportedFormatError(HoloflowError):
    """File carries an unknown magic number or version."""
