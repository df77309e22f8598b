"""Exception hierarchy shared by every module."""


class PoseGenError(Exception):
    """Base class."""


class ShapeError(PoseGenError, ValueError):
    """Tensor extents or video dimensions violate an operation's contract."""


class ConfigError(PoseGenError, ValueError):
    """Inconsistent or unsupported configuration."""


class UsageError(PoseGenError, RuntimeError):
    """An API was called in a state it does not support."""


class CacheMissError(PoseGenError, KeyError):
    """A gated (layer, timestep) pair has no cached source entry."""


class DivergenceError(PoseGenError, FloatingPointError):
    """Training produced a non-finite loss."""
