"""Exception hierarchy shared by every radnet module."""

from __future__ import annotations


class RadnetError(Exception):
    """Base class for all errors raised by radnet."""


class ShapeError(RadnetError, ValueError):
    pass


class ConfigError(RadnetError, ValueError):
    pass


class DataError(RadnetError, ValueError):
    pass


class KindError(DataError):
    """A volume of the wrong kind (hu / normalized / mask) was supplied."""


class UsageError(RadnetError):
    pass


class GraphStateError(RadnetError, RuntimeError):
    """Backward was requested on a graph that no longer exists."""


class DivergenceError(RadnetError, RuntimeError):
    pass


class FormatError(RadnetError):
    """Malformed RVOL1 / RCKPT1 / CSV input.

    ``offset`` is the byte offset (or line number for CSV) where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
