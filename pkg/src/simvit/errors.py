"""Exception types raised across the package."""


class SimViTError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SimViTError):
    """Tensor extents do not satisfy an operation's contract."""


class GeometryError(SimViTError):
    """Window/patch geometry is inconsistent with the map resolution."""


class NumericError(SimViTError):
    """Non-finite values where finite ones are required."""


class ConfigError(SimViTError):
    """A model or run configuration failed validation."""


class WeightFileError(SimViTError):
    """A weight file is malformed or does not match the model."""


class PPMError(SimViTError):
    """A PPM image file is malformed or unsupported."""
