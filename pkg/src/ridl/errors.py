"""Exception hierarchy shared across the package."""


class RidlError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class VolumeFormatError(RidlError, ValueError):
    """A volume/mask file or its sidecar header is missing or malformed."""

    category = "input"


class EmptyRoiError(RidlError, ValueError):
    """An operation needs at least one ROI voxel and got none."""

    category = "data"


class EmptyMatrixError(RidlError, ValueError):
    """A texture matrix has no counts (e.g. an isolated voxel has no co-occurring pairs)."""

    category = "data"


class ShapeMismatchError(RidlError, ValueError):
    category = "data"


class ConfigError(RidlError, ValueError):
    category = "config"


class InsufficientEntriesError(RidlError, ValueError):
    """The feature bank holds too few entries to estimate a correlation."""

    category = "data"
