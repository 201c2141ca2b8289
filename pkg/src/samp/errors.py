"""Exception taxonomy shared by all engine modules."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EngineError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(EngineError):
    """Inconsistent configuration (plan/mode mismatch, bad head count, ...)."""


class CalibrationError(EngineError):
    """Missing or invalid quantization scales."""


class InputError(EngineError):
    """Invalid runtime input (token id out of range, empty data file, ...)."""


class ArchiveError(EngineError):
    """Base for model archive problems."""


class LoadError(ArchiveError):
    """Archive is missing required pieces or a tensor has the wrong shape."""


class FormatError(ArchiveError):
    """Archive bytes or metadata are structurally corrupt."""


class DataFormatError(EngineError):
    """Evaluation/calibration data file could not be parsed."""


class InfeasibleError(EngineError):
    """No profile point satisfies the requested threshold."""
