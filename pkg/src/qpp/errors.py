"""Exception types shared across the engine.

Every error carries a stable ``code`` string so the CLI and tests can match
on the failure kind rather than on message text.
"""


class EngineError(Exception):
    """Base class for all engine failures."""

    code = "INTERNAL"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class FormatError(EngineError):
    code = "FORMAT_ERROR"


class DimensionMismatch(EngineError):
    code = "DIMENSION_MISMATCH"


class NonFiniteValue(EngineError):
    code = "NON_FINITE_VALUE"


class DuplicateId(EngineError):
    code = "DUPLICATE_ID"


class UnknownLabel(EngineError):
    code = "UNKNOWN_LABEL"


class UnknownDocId(EngineError):
    code = "UNKNOWN_DOC_ID"


class EmptyRelevantSet(EngineError):
    code = "EMPTY_RELEVANT_SET"


class MissingDetections(EngineError):
    code = "MISSING_DETECTIONS"


class KTooLarge(EngineError):
    code = "K_TOO_LARGE"


class DegenerateLabels(EngineError):
    code = "DEGENERATE_LABELS"


class EmptyList(EngineError):
    code = "EMPTY_LIST"


class ZeroVector(EngineError):
    code = "ZERO_VECTOR"


class NormalizationMismatch(EngineError):
    code = "NORMALIZATION_MISMATCH"


class TooFewQueries(EngineError):
    code = "TOO_FEW_QUERIES"


class InvalidRange(EngineError):
    code = "INVALID_RANGE"


class LengthMismatch(EngineError):
    code = "LENGTH_MISMATCH"


class MissingScores(EngineError):
    code = "MISSING_SCORES"


class ConfigError(EngineError):
    code = "CONFIG_ERROR"
