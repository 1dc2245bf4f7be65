"""Exception hierarchy shared by every subsystem."""


class EGSError(Exception):
    """Base class for all library errors."""


class DimensionError(EGSError, ValueError):
    pass


class DomainError(EGSError, ValueError):
    pass


class GeometryError(EGSError, ValueError):
    pass


class EvaluationError(EGSError, ArithmeticError):
    pass


class FormatError(EGSError, ValueError):
    """Raised when a binary container fails magic, version or shape validation."""


class ShapeMismatchError(FormatError):
    pass


class ManifestError(EGSError, FileNotFoundError):
    pass


class DataError(EGSError, ValueError):
    pass


class ConfigError(EGSError, ValueError):
    pass
