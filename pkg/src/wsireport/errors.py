"""Exception types shared across the pipeline."""


class WsiReportError(Exception):
    """Base class for all package errors."""


# --- feature store -----------------------------------------------------------

class StoreFormatError(WsiReportError):
    """A feature file violates the declared on-disk format."""


class MagicMismatch(StoreFormatError):
    """Wrong magic bytes / unusable header."""


class DimMismatch(StoreFormatError):
    """A feature row length disagrees with the declared dimension."""


class CountMismatch(StoreFormatError):
    """The number of stored rows disagrees with the declared count."""


class EmptyStore(StoreFormatError):
    """The file declares zero patches."""


class ZeroVector(WsiReportError):
    """A feature row has (near-)zero norm and cannot be normalized."""

    def __init__(self, index: int):
        super().__init__(f"feature row {index} has zero norm")
        self.index = index


# --- sampling / retrieval ----------------------------------------------------

class KTooLarge(WsiReportError):
    """Requested more clusters than there are patches."""


class UnnormalizedStore(WsiReportError):
    """An operation requiring unit-norm rows got a raw store."""


class BadQueryNorm(WsiReportError):
    """Query embedding is not unit-norm."""


# --- model clients -----------------------------------------------------------

class TransportError(WsiReportError):
    """A model service call failed after exhausting retries."""

    def __init__(self, status, detail: str = ""):
        super().__init__(f"transport failure (status={status}) {detail}".rstrip())
        self.status = status


class EmptyResponse(WsiReportError):
    """A model service returned an empty or contentless response."""


class PartialBatch(WsiReportError):
    """Some patches in a describe batch failed.

    Carries the failed input indices and the descriptions that did succeed,
    so callers can keep the partial evidence.
    """

    def __init__(self, indices, descriptions=()):
        super().__init__(f"describe failed for input indices {sorted(indices)}")
        self.indices = tuple(sorted(indices))
        self.descriptions = tuple(descriptions)


class EmbedderFailure(WsiReportError):
    """The token embedder raised while scoring a text pair."""


# --- qc engine ---------------------------------------------------------------

class Unparseable(WsiReportError):
    """Critic output is not a parseable assessment document."""


class SchemaViolation(WsiReportError):
    """Critic output parsed but violates the assessment wire schema."""


# --- orchestration / cli -----------------------------------------------------

class ConfigError(WsiReportError):
    """Pipeline configuration is invalid."""


class MalformedTrace(WsiReportError):
    """A trace file cannot be read back as a valid event stream."""
