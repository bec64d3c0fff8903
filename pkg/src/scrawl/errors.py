"""Exception types shared across the library."""


class ScrawlError(Exception):
    """Base class for all library errors."""


# --- file parsing ------------------------------------------------------------

class BadMagicError(ScrawlError):
    """File starts with the wrong magic number for its kind."""


class TruncatedFileError(ScrawlError):
    """File ends before the payload its header declares."""


class ZeroDimensionError(ScrawlError):
    """Image file declares a zero height or width."""


class CorruptFileError(ScrawlError):
    """Serialized container is damaged or malformed."""


class VersionMismatchError(ScrawlError):
    """Serialized container was written by an incompatible format version."""


# --- datasets and charsets ----------------------------------------------------

class EmptyDatasetError(ScrawlError):
    """Operation requires at least one sample."""


class TargetTooSmallError(ScrawlError):
    """Padding target is smaller than the image."""


class OutOfCharsetError(ScrawlError):
    """Character or label is not a member of the configured charset."""


class CharsetTooSmallError(ScrawlError):
    """Charset has too few members for the operation (needs >= 2)."""


class EmptyClassError(ScrawlError):
    """Reference dataset has no samples for some class."""


# --- neural network core -------------------------------------------------------

class ShapeMismatchError(ScrawlError):
    """Operand shapes are incompatible."""


class DimMismatchError(ScrawlError):
    """Input dimensions do not match what the model expects."""


class DegenerateBatchError(ScrawlError):
    """Batch is too small for well-defined batch statistics."""


class GraphNotRecordedError(ScrawlError):
    """backward() called without a recorded forward pass."""


class ConfigInvalidError(ScrawlError):
    """Training or CLI configuration violates a precondition."""


# --- glyph geometry ------------------------------------------------------------

class BlankImageError(ScrawlError):
    """Image contains no ink above the threshold."""


class BlankBandError(ScrawlError):
    """Measurement band contains no ink."""


class SegmentationError(ScrawlError):
    """Word image does not segment into one ink run per letter."""


# --- profile / controller -------------------------------------------------------

class IgnoredPairError(ScrawlError):
    """Letter pair is outside the tracked pair classes."""


class NoProfileDataError(ScrawlError):
    """Profile cell has no observations for the requested pair."""
