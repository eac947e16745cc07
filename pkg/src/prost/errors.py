"""Exception hierarchy shared across the package."""


class ProstError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ProstError, ValueError):
    """Malformed or non-finite input."""


class SingularityError(ProstError, ValueError):
    """Rotation too close to the pi branch cut of the SO(3) logarithm."""


class GeometryError(ProstError, ValueError):
    """Inconsistent projection geometry (e.g. source inside the volume)."""


class DegenerateInputError(ProstError, ValueError):
    """Zero-variance image fed to a correlation metric."""


class DegenerateGradientError(ProstError, ValueError):
    """Gradient block too small to normalise."""


class VolumeFormatError(ProstError, OSError):
    """Base class for volume file problems."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class HeaderValidationError(VolumeFormatError):
    pass


class ConfigError(ProstError, ValueError):
    """Bad key=value configuration."""
