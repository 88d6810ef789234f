"""Exception hierarchy shared by all dlcrec modules."""

from __future__ import annotations


class DLCRecError(Exception):
    """Base class for every error raised by this package."""


# data ingestion
class MalformedRow(DLCRecError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class EmptyCatalog(DLCRecError):
    pass


class EmptyTrainSplit(DLCRecError):
    pass


# prompt codec
class KOutOfRange(DLCRecError):
    pass


class NoRecognizableGenre(DLCRecError):
    pass


class EmptyTargets(DLCRecError):
    pass


class WrongGenreCount(DLCRecError):
    pass


class TrailMismatch(DLCRecError):
    pass


class IoFailure(DLCRecError):
    pass


# augmentation
class TaxonomyExhausted(DLCRecError):
    pass


class DistributionGap(DLCRecError):
    pass


# backends
class BackendError(DLCRecError):
    """Anything that went wrong while producing a completion."""


class TransportError(BackendError):
    pass


class BadResponse(BackendError):
    pass


class GenerationTimeout(BackendError):
    pass


class UnknownSequence(BackendError):
    pass


class UnknownPrompt(BackendError):
    pass


# grounding
class ProviderFailure(DLCRecError):
    pass


class DimensionMismatch(DLCRecError):
    pass


class EmptyIndex(DLCRecError):
    pass


class CatalogTooSmall(DLCRecError):
    pass


# metrics
class UnknownItem(DLCRecError):
    pass


class EmptyInput(DLCRecError):
    pass


# pipeline / cli
class StageFailure(DLCRecError):
    """A pipeline stage failed; ``trace`` holds everything produced before it."""

    def __init__(self, stage: str, cause: BaseException, trace: dict | None = None):
        super().__init__(f"stage {stage} failed: {cause!r}")
        self.stage = stage
        self.cause = cause
        self.trace = trace if trace is not None else {}


class ConfigError(DLCRecError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = list(problems)
