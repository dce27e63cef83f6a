"""Exception types raised by the engine.

Every failure mode the public API can report has its own class so callers
can catch precisely; all inherit from EngineError.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


# --- tensors and shapes ---

class NonFiniteValueError(EngineError):
    """A tensor would contain NaN or Inf."""


class CountMismatchError(EngineError):
    """Reshape target holds a different number of elements."""


class NonPositiveOutputError(EngineError):
    """Convolution geometry yields a non-positive spatial output."""


class IndivisibleStrideError(EngineError):
    """Stride does not evenly divide the padded input extent."""


class ShapeMismatchError(EngineError):
    """Operand shapes are inconsistent."""


# --- loss / labels ---

class LengthMismatchError(EngineError):
    """Prediction and target vectors differ in length."""


class NotOneHotError(EngineError):
    """Target vector is not one-hot."""


class OutOfRangeError(EngineError):
    """Class index outside [0, num_classes)."""


# --- metadata and images ---

class MissingColumnError(EngineError):
    """Required CSV column absent from the header."""


class BadValueError(EngineError):
    """A CSV cell failed validation."""

    def __init__(self, row: int, column: str, message: str):
        super().__init__(f"row {row}, column {column!r}: {message}")
        self.row = row
        self.column = column


class BadMagicError(EngineError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(EngineError):
    """File ends before its declared content."""


class BadDimensionsError(EngineError):
    """Image header declares unusable dimensions or sample depth."""


class EmptyDatasetError(EngineError):
    """An operation that needs examples received none."""


# --- model construction and training ---

class BadInputSizeError(EngineError):
    """Input extents do not survive the configured pooling stages."""


class BadConfigError(EngineError):
    """Model configuration violates its invariants."""


class StaleCacheError(EngineError):
    """Backward invoked with caches not produced by a train-mode forward
    on the same graph."""


class EmptyTrainSetError(EngineError):
    """Training requested with an empty train split."""


# --- transfer head ---

class TrunkDimensionDriftError(EngineError):
    """Feature extractor returned vectors of inconsistent width."""


class DegenerateLabelsError(EngineError):
    """Head training needs at least one example of each class."""


class DimensionMismatchError(EngineError):
    """Bottleneck width does not match the head input width."""


# --- frozen model container ---

class IoFailureError(EngineError):
    """Underlying file operation failed."""


class NonFiniteParameterError(EngineError):
    """Refusing to freeze a graph holding NaN/Inf parameters."""


class UnsupportedVersionError(EngineError):
    """Container version not understood by this build."""


class ChecksumMismatchError(EngineError):
    """Stored CRC does not match the file content."""


class DescriptorBlobMismatchError(EngineError):
    """Descriptor-declared payload sizes disagree with the file."""


class FrozenGraphImmutableError(EngineError):
    """Thawed graphs are inference-only; training paths are rejected."""
