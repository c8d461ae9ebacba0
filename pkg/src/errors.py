"""Exception hierarchy shared by every stage of the pipeline."""


class EmotokError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(EmotokError, ValueError):
    """An argument is out of range or inconsistent with another argument."""


class DegenerateInputError(EmotokError, ValueError):
    """Input has no direction (zero norm) where one is required."""


class DivergenceUndefinedError(EmotokError, ValueError):
    """KL divergence has no finite value for the given pair."""


class DatasetLoadError(EmotokError):
    """A manifest or sample file is missing, malformed or inconsistent."""


class EmptySequenceError(EmotokError, ValueError):
    pass


class SplitError(EmotokError):
    pass


class TopologyError(EmotokError):
    """Joint graph references unknown joints or is not connected."""


class PreconditionError(EmotokError):
    pass


class TokenOverflowError(EmotokError):
    """Raw token vector is longer than the unified length L."""


class TrainingDivergedError(EmotokError):
    """Loss became NaN or infinite during optimization."""


class MetricUndefinedError(EmotokError):
    pass


class ConfigError(EmotokError):
    pass


class CheckpointError(EmotokError):
    pass


class RunFinalizedError(EmotokError):
    """Attempted write into a run directory that carries a FINALIZED marker."""


class TransportError(EmotokError):
    """Remote decoder request failed; `attempts` counts every try made."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class RemoteTimeoutError(TransportError):
    pass


class RemoteStatusError(TransportError):
    def __init__(self, message: str, status_code: int, attempts: int = 1):
        super().__init__(message, attempts)
        self.status_code = status_code


class RemoteSchemaError(TransportError):
    def __init__(self, message: str, field: str, attempts: int = 1):
        super().__init__(message, attempts)
        self.field = field
