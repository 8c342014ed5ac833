"""Exception types raised across the package."""


class ExdropError(Exception):
    """Base class for all package errors."""


class DimensionError(ExdropError, ValueError):
    """Shapes do not agree."""


class ValidationError(ExdropError, ValueError):
    """An argument is outside its valid domain."""


class FormatError(ExdropError, ValueError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
