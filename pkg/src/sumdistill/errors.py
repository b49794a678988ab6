"""Exception hierarchy shared across the pipeline."""


class SumdistillError(Exception):
    """Base class for all package errors."""


class ConfigError(SumdistillError):
    """Invalid run configuration or plan."""


class CorpusError(SumdistillError):
    """Corpus file or record violates the corpus contract."""


class IngestError(CorpusError):
    """Document stream could not be read; message carries the position."""


class PartitionError(CorpusError):
    """Requested partition sizes exceed the corpus."""


class EmptyCorpusError(SumdistillError):
    """A pipeline step produced or received an empty corpus where data is required."""


class CodecError(SumdistillError):
    """Record or prompt violates the serialization templates."""


class EmptyGeneration(CodecError):
    """Model output is empty after sentinel stripping; the pair is dropped upstream."""


class MetricError(SumdistillError):
    """Invalid input to a closed-form measurement."""


class FilterError(SumdistillError):
    """Filter specification or evaluation failure."""


class NSPContextMissing(FilterError):
    """Next-sentence filter evaluated on a record without a following sentence."""


class UndecidedBudgetExceeded(FilterError):
    """Too many pairs left undecided by backend outages; the run must not silently drop data."""


class BackendError(SumdistillError):
    """Base class for model-backend failures."""


class TransportError(BackendError):
    """Retryable transport-level failure (timeout, connection, overload)."""


class ModelNotFoundError(BackendError):
    """Fatal configuration error: the backend does not serve the requested model."""


class BadRequestError(BackendError):
    """The backend rejected the request as malformed."""
