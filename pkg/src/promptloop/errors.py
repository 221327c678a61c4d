"""Exception hierarchy shared across the package."""


class PromptLoopError(Exception):
    """Base class for all errors raised by this package."""


class EmptyPrompt(PromptLoopError):
    """Prompt text is blank after trimming."""


class InvalidCharacters(PromptLoopError):
    """Prompt text contains control characters other than newline."""


class DslParseError(PromptLoopError, ValueError):
    """Base class for prompt-syntax parse failures; carries a byte position."""

    def __init__(self, message: str, position: int):
        super().__init__(message)
        self.position = position


class UnbalancedDelimiter(DslParseError):
    """A parenthesis or bracket was opened but never closed, or vice versa."""


class InvalidWeightLiteral(DslParseError):
    """The weight suffix after ':' is not a positive decimal number."""


class UnknownKeyword(PromptLoopError, KeyError):
    """Requested keyword phrase is not present in the set."""


class WeightAboveCap(PromptLoopError, ValueError):
    """Requested attention weight exceeds the configured cap."""


class DimensionMismatch(PromptLoopError, ValueError):
    """Embeddings of unequal dimension were combined."""


class ZeroVector(PromptLoopError, ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""


class EmptyBatch(PromptLoopError, ValueError):
    """An aggregation was requested over zero scores."""


class ConfigInvalid(PromptLoopError, ValueError):
    """A run or endpoint configuration violates its invariants."""


class NoKeywordsExtracted(PromptLoopError):
    """Keyword extraction produced an empty set."""


class VocabularyExhausted(PromptLoopError):
    """The simulated world ran out of basis directions for new phrases."""


class RefinerNoProgress(PromptLoopError):
    """The refiner returned the same phrase and no reweight was available."""


class BatchSizeMismatch(PromptLoopError):
    """A generator returned a different number of images than requested."""


class MissingTrace(PromptLoopError):
    """A trace file is absent or empty."""


class SchemaMismatch(PromptLoopError):
    """A persisted trace record does not match the documented schema."""
