"""Exception types raised by file readers and validators."""


class LidarMocapError(Exception):
    """Base class for all package errors."""


class FormatError(LidarMocapError):
    """A file does not follow its declared on-disk format."""


class FormatVersionError(FormatError):
    """A file declares a format name or version this reader does not support."""


class TruncatedFileError(FormatError):
    """A file ended before all declared records were read."""


class DimensionMismatchError(FormatError):
    """Array shapes inside a file or object are mutually inconsistent."""


class InvalidInputError(LidarMocapError):
    """A numeric input is NaN or infinite."""


class ConfigError(LidarMocapError):
    """A configuration value is missing, malformed or out of range."""


class CalibrationError(LidarMocapError):
    """Calibration inputs are degenerate (too few points, parallel planes)."""


class SyncError(LidarMocapError):
    """Peak detection or clock alignment failed."""


class LocalizationError(LidarMocapError):
    """Localization could not produce a track (no usable detections)."""


class NonFiniteLossError(LidarMocapError):
    """An objective term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term
        self.value = value


class OptimizationError(LidarMocapError):
    """A window optimization failed; carries the window index."""

    def __init__(self, window: int, cause: Exception):
        super().__init__(f"window {window}: {cause}")
        self.window = window
        self.cause = cause
