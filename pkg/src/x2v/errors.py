"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class ConfigError(ValueError):
    """Invalid configuration (head split, mode mismatch, bad plan args, ...)."""


class MissingReferenceError(ValueError):
    """Interpolation mode requested without an end-frame reference."""


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite during training."""


class TrappedCameraError(RuntimeError):
    """All candidate camera positions collide; the trajectory must restart."""


class DataError(ValueError):
    """Malformed dataset, manifest, or checkpoint content."""
