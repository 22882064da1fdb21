"""Exception taxonomy for the pipeline.

Every contract violation raises a named subclass of :class:`LunarDemError`
so callers (and the CLI exit-code mapping) can distinguish usage mistakes,
IO failures, and numeric aborts.
"""


class LunarDemError(Exception):
    """Base class for all pipeline errors."""


# --- raster_io ---------------------------------------------------------------

class MissingFileError(LunarDemError):
    pass


class UnsupportedBandCountError(LunarDemError):
    pass


class UnsupportedBitDepthError(LunarDemError):
    pass


class CrsMismatchError(LunarDemError):
    pass


class DegenerateTransformError(LunarDemError):
    pass


class IoFailureError(LunarDemError):
    pass


# --- preprocess / tile store --------------------------------------------------

class ShapeMismatchError(LunarDemError):
    pass


class EmptyTileError(LunarDemError):
    pass


class BadRatiosError(LunarDemError):
    pass


class ManifestVersionError(LunarDemError):
    pass


class CorruptTileError(LunarDemError):
    pass


# --- model -------------------------------------------------------------------

class BadConfigError(LunarDemError):
    pass


class BadShapeError(LunarDemError):
    pass


class NonFiniteInputError(LunarDemError):
    pass


class ConfigMismatchError(LunarDemError):
    pass


class CorruptCheckpointError(LunarDemError):
    pass


# --- losses ------------------------------------------------------------------

class EmptyMaskError(LunarDemError):
    pass


class TooSmallError(LunarDemError):
    pass


class MissingStatsError(LunarDemError):
    pass


# --- train -------------------------------------------------------------------

class EmptySplitError(LunarDemError):
    pass


class NonFiniteLossError(LunarDemError):
    """Raised when a training loss turns NaN/Inf; carries offending tile ids."""

    def __init__(self, message: str, tile_ids=None):
        super().__init__(message)
        self.tile_ids = list(tile_ids) if tile_ids is not None else []


class OutOfRangeError(LunarDemError):
    pass


# --- inference / metrics -------------------------------------------------------

class NegativePtpError(LunarDemError):
    pass


class MissingMetadataError(LunarDemError):
    pass


class OutOfBoundsError(LunarDemError):
    pass
