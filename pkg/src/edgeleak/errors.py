class EdgeLeakError(Exception):
    """Base class for all package errors."""


class ParameterError(EdgeLeakError, ValueError):
    pass


class ShapeError(EdgeLeakError, ValueError):
    pass


class SamplingError(EdgeLeakError):
    pass


class QueryError(EdgeLeakError, IndexError):
    pass


class TrainingError(EdgeLeakError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ResourceError(EdgeLeakError, MemoryError):
    pass


class InputError(EdgeLeakError, ValueError):
    pass


class UndefinedMetricError(EdgeLeakError, ValueError):
    pass


class FormatError(EdgeLeakError, ValueError):
    """Malformed input file; carries the offending path and line."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
