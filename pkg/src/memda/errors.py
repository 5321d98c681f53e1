"""Exception hierarchy shared by every memda module."""


class MemDAError(Exception):
    """Base class for library errors."""


class ConfigurationError(MemDAError, ValueError):
    pass


class WindowError(MemDAError, ValueError):
    """Raised when an anchor does not have enough history for its input window."""

    def __init__(self, message: str, earliest_valid: int | None = None):
        super().__init__(message)
        self.earliest_valid = earliest_valid


class DataError(MemDAError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OrderingError(DataError):
    pass


class ShapeError(MemDAError, ValueError):
    pass


class MemoryMissError(MemDAError, LookupError):
    """A replay entry is absent and cannot be recomputed."""


class DivergenceError(MemDAError, RuntimeError):
    pass
