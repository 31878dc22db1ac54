"""Exception types raised across the package.

The CLI maps every :class:`KwsError` to exit status 1.
"""


class KwsError(Exception):
    """Base class for domain errors."""


class WavDecodeError(KwsError):
    pass


class DatasetIndexError(KwsError):
    pass


class FeatureError(KwsError):
    pass


class ShapeError(KwsError, ValueError):
    pass


class CheckpointError(KwsError):
    pass


class RocError(KwsError):
    pass
