"""Exception types shared across the package."""


class DSpeechError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DSpeechError, ValueError):
    """Invalid configuration ("bad config")."""


class NoDataError(DSpeechError, ValueError):
    """An input collection was empty after filtering."""


class ShapeError(DSpeechError, ValueError):
    """Array dimensions disagree with the model configuration."""


class StaleCacheError(DSpeechError, ValueError):
    """An activation cache was produced by different parameters."""


class OracleLimitError(DSpeechError, ValueError):
    """A brute-force oracle was asked to enumerate too much."""


class ArpaParseError(DSpeechError, ValueError):
    """Malformed ARPA file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedRateError(DSpeechError, ZeroDivisionError):
    """Error rate against an empty reference with a non-empty hypothesis."""


class DegenerateSNRError(DSpeechError, ValueError):
    """Signal or noise has zero power."""


class DivergedError(DSpeechError, FloatingPointError):
    """Non-finite values reached the optimizer."""


class ManifestError(DSpeechError, ValueError):
    """A manifest produced no usable lines."""


class PipelineError(DSpeechError):
    """A module failed inside a pipeline run; ``module`` names the stage."""

    def __init__(self, module: str, cause: Exception):
        super().__init__(f"{module}: {type(cause).__name__}: {cause}")
        self.module = module
        self.cause = cause
