"""Exception types shared across the package."""


class RayfusionError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RayfusionError, ValueError):
    """An argument violates a documented precondition (NaN point, empty list...)."""


class OutOfBoundsError(RayfusionError, ValueError):
    """A sample location falls outside the valid interpolation domain."""


class ConfigError(RayfusionError, ValueError):
    """A configuration value violates an invariant; the message names the field."""


class EmptyResultError(RayfusionError, ValueError):
    """A pipeline stage produced nothing to work with (e.g. too few keyframes)."""


class SidecarFormatError(RayfusionError, ValueError):
    """A binary sidecar file has a bad magic/header or truncated payload."""


class MeshIOError(RayfusionError, OSError):
    """Reading or writing a mesh file failed; the message includes the path."""
