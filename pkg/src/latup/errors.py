"""Exception types shared across the package.

Every reader/validator raises one of these instead of returning partial
data, so callers can tell malformed input apart from internal bugs.
"""


class LatupError(Exception):
    """Base class for all package errors."""


class ShapeError(LatupError):
    """Invalid or mismatched tensor/volume shapes."""


class NumericError(LatupError):
    """A forward operation produced NaN or infinity from finite inputs."""


class GraphError(LatupError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


class ConfigError(LatupError):
    """Invalid configuration value, unknown key, or inconsistent setting."""


class FormatError(LatupError):
    """Malformed file content (bad magic, bad header fields)."""


class UnsupportedDtypeError(FormatError):
    """File declares a data type this reader does not support."""


class TruncatedError(FormatError):
    """File payload shorter than the header promises."""


class CheckpointError(LatupError):
    """Checkpoint incompatible with the target network (digest mismatch)."""


class TrainingError(LatupError):
    """Training aborted (non-finite loss or gradient)."""
