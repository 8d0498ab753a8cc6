"""Exception types shared across the package."""


class WclmError(Exception):
    """Base class for all package errors."""


class ShapeError(WclmError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(WclmError):
    """A computation produced or encountered non-finite or degenerate values."""


class VocabularyError(WclmError):
    """A token id or string is not covered by the vocabulary in use."""


class ConfigError(WclmError):
    """Invalid configuration or parameter value, or a malformed config file."""


class SequenceLengthError(WclmError):
    """A token sequence exceeds the applicable maximum length."""


class ExampleError(WclmError):
    """A training example cannot be assembled or carries no supervision."""


class DivergenceError(WclmError):
    """Training produced a non-finite loss or gradient."""


class StateError(WclmError):
    """An operation was invoked in an invalid object state."""


class MetricError(WclmError):
    """A metric is undefined for the given inputs."""


class ProviderError(MetricError):
    """An external scoring or embedding provider failed or lacks an entry."""


class JudgeParseError(MetricError):
    """A judge backend response did not contain a parsable rubric score."""

    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


class CalibrationError(WclmError):
    """Threshold calibration is impossible (e.g. single-class labels)."""


class DataConsistencyError(WclmError):
    """Evaluation records violate an integrity constraint."""
