class WeaksalError(Exception):
    """Base class for input/contract errors (CLI exit code 2)."""


class MalformedFile(WeaksalError):
    pass


class UnsupportedFormat(WeaksalError):
    pass


class DimensionMismatch(WeaksalError, ValueError):
    pass


class ShapeError(WeaksalError, ValueError):
    pass


class EmptyDataset(WeaksalError):
    pass


class EmptyCurve(WeaksalError):
    pass


class MissingMap(WeaksalError):
    pass


class ConfigError(WeaksalError, ValueError):
    pass
