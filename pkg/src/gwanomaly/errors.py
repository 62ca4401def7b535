"""Exception hierarchy shared by every module."""


class GWError(Exception):
    """Base class for all package errors."""


class ShapeError(GWError, ValueError):
    pass


class DomainError(GWError, ValueError):
    pass


class ConfigError(GWError, ValueError):
    pass


class FormatError(GWError):
    """File is not of the expected container type (bad magic, version, dtype)."""


class CorruptFileError(FormatError):
    """Container header is valid but the body is damaged."""


class CorruptCheckpointError(CorruptFileError):
    pass


class NumericsError(GWError, ArithmeticError):
    pass


class UndefinedMetricError(GWError, ValueError):
    pass
