"""Exception types shared across the package."""


class WavesepError(Exception):
    """Base class for all package errors."""


class ConfigError(WavesepError, ValueError):
    """Invalid configuration value (bad stride, unknown variant, ...)."""


class ShapeError(WavesepError, ValueError):
    """Operands have incompatible shapes."""


class InputTooShortError(WavesepError, ValueError):
    """Signal shorter than the analysis filter length."""


class TooFewFramesError(WavesepError, ValueError):
    """Not enough short-time frames for the requested context length."""


class DegenerateCorrelationError(WavesepError, ValueError):
    """A correlation-based loss denominator fell below its guard."""


class CalibrationError(WavesepError, ValueError):
    """A loss term evaluated too close to zero to normalize."""


class AudioFormatError(WavesepError, ValueError):
    """Unsupported or malformed audio/container file."""


class TrainingDivergedError(WavesepError, RuntimeError):
    """Loss became non-finite during training."""
