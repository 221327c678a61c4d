"""Domain types shared by every stage of the refinement loop.

Everything here is immutable after construction and safe to share between
workers. Constructors validate their invariants and raise instead of
producing a bad value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyPrompt,
    InvalidCharacters,
)

if TYPE_CHECKING:
    from .scoring import SimilarityReport

# A cosine similarity value. Producers clamp to [-1, 1]; consumers may rely
# on |value| <= 1 + SCORE_EPSILON.
SimilarityScore = float
SCORE_EPSILON = 1e-9

DEFAULT_WEIGHT_CAP = 1.5

_ALLOWED_CONTROL = {"\n"}


def _has_forbidden_control(text: str) -> bool:
    return any(ch < " " and ch not in _ALLOWED_CONTROL or ch == "\x7f" for ch in text)


@dataclass(frozen=True, slots=True)
class Prompt:
    """A scene description plus optional concepts to suppress."""

    text: str
    negative_text: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyPrompt("prompt text is empty after trimming")
        if _has_forbidden_control(self.text):
            raise InvalidCharacters("prompt text contains control characters")


def validate_prompt(text: str, negative_text: str = "") -> Prompt:
    """Build a Prompt, raising EmptyPrompt or InvalidCharacters on bad input."""
    return Prompt(text=text, negative_text=negative_text)


@dataclass(frozen=True, slots=True)
class Keyword:
    """One extracted phrase with its attention multiplier."""

    phrase: str
    weight: float = 1.0

    def __post_init__(self):
        if not self.phrase.strip():
            raise ValueError("keyword phrase is empty after trimming")
        if not math.isfinite(self.weight) or self.weight <= 0:
            raise ValueError(f"keyword weight must be a positive finite real, got {self.weight!r}")

    @property
    def key(self) -> str:
        return self.phrase.strip().casefold()


@dataclass(frozen=True, slots=True)
class KeywordSet:
    """Ordered keywords, deduplicated by case-folded phrase (first spelling wins)."""

    keywords: tuple[Keyword, ...]

    def __post_init__(self):
        seen: dict[str, Keyword] = {}
        deduped = []
        for kw in self.keywords:
            if kw.key not in seen:
                seen[kw.key] = kw
                deduped.append(kw)
        object.__setattr__(self, "keywords", tuple(deduped))

    @classmethod
    def from_phrases(cls, phrases) -> "KeywordSet":
        return cls(tuple(Keyword(p) if isinstance(p, str) else p for p in phrases))

    def __len__(self) -> int:
        return len(self.keywords)

    def __iter__(self):
        return iter(self.keywords)

    def __contains__(self, phrase: str) -> bool:
        key = phrase.strip().casefold()
        return any(kw.key == key for kw in self.keywords)

    def get(self, phrase: str) -> Keyword | None:
        key = phrase.strip().casefold()
        for kw in self.keywords:
            if kw.key == key:
                return kw
        return None

    def phrases(self) -> tuple[str, ...]:
        return tuple(kw.phrase for kw in self.keywords)


@dataclass(frozen=True, slots=True)
class Embedding:
    """A fixed-dimension feature vector with all entries finite."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) < 1:
            raise ValueError("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains NaN or Inf")

    @property
    def dim(self) -> int:
        return len(self.values)


def check_same_dim(embeddings) -> int:
    """Return the common dimension of all embeddings or raise DimensionMismatch."""
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed embedding dimensions: {sorted(dims)}")
    if not dims:
        raise DimensionMismatch("no embeddings given")
    return dims.pop()


@dataclass(frozen=True, slots=True)
class ImageRef:
    """Handle to one generated image: pixels on disk, raw bytes, or a
    simulated latent embedding."""

    id: str
    iteration: int
    index_in_batch: int
    path_or_payload: str | bytes | Embedding

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        if self.index_in_batch < 0:
            raise ValueError("index_in_batch must be non-negative")

    @property
    def latent(self) -> Embedding | None:
        return self.path_or_payload if isinstance(self.path_or_payload, Embedding) else None


class Aggregation(enum.Enum):
    MAX_OVER_BATCH = "max_over_batch"
    MEAN_OVER_BATCH = "mean_over_batch"


class PolicyKind(enum.Enum):
    REWEIGHT_THEN_GENERALIZE = "reweight_then_generalize"
    REWEIGHT_ONLY = "reweight_only"
    GENERALIZE_ONLY = "generalize_only"


class Outcome(enum.Enum):
    CONVERGED = "converged"
    ITERATION_CAP_REACHED = "iteration_cap_reached"


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Tunables for one refinement run.

    Keywords pass the gate when their aggregated score is strictly above
    `threshold` (or >= when strict_threshold is off).
    """

    threshold: float = 0.2
    batch_size: int = 16
    max_iterations: int = 8
    weight_step: float = 1.1
    weight_cap: float = DEFAULT_WEIGHT_CAP
    reweight_attempts_before_generalize: int = 2
    seed: int = 0
    aggregation: Aggregation = Aggregation.MAX_OVER_BATCH
    strict_threshold: bool = True

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ConfigInvalid(f"threshold must be in (0, 1), got {self.threshold}")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ConfigInvalid("max_iterations must be >= 1")
        if self.weight_step <= 1.0:
            raise ConfigInvalid("weight_step must be > 1")
        if self.weight_cap < 1.0 or self.weight_cap < self.weight_step:
            raise ConfigInvalid("weight_cap must be >= 1 and >= weight_step")
        if self.reweight_attempts_before_generalize < 0:
            raise ConfigInvalid("reweight_attempts_before_generalize must be >= 0")
        if not (0 <= self.seed < 2**64):
            raise ConfigInvalid("seed must fit in 64 unsigned bits")


def default_config() -> RunConfig:
    """The documented defaults: threshold 0.2, batches of 16, 1.1 weight steps."""
    return RunConfig()


@dataclass(frozen=True, slots=True)
class IterationRecord:
    """Everything one loop iteration produced, in the order it happened."""

    iteration: int
    rendered_prompt: str
    keywords: KeywordSet
    image_refs: tuple[ImageRef, ...]
    report: "SimilarityReport"
    policy_action: "PolicyAction"

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")


@dataclass(frozen=True, slots=True)
class RunTrace:
    """The full history of a run plus its terminal state."""

    config: RunConfig
    initial_prompt: Prompt
    records: tuple[IterationRecord, ...]
    outcome: Outcome
    final_max_similarity: SimilarityScore

    def __post_init__(self):
        if not self.records:
            raise ValueError("a trace must contain at least one record")
        for i, rec in enumerate(self.records):
            if rec.iteration != i:
                raise ValueError("iteration indices must be contiguous from 0")
        if self.outcome is Outcome.CONVERGED and not self.records[-1].report.all_passed:
            raise ValueError("converged trace must have every keyword passing in its last record")


@dataclass(frozen=True, slots=True)
class PolicyAction:
    """What a refinement step changed: boosted phrases and/or replacements."""

    reweighted: tuple[str, ...] = ()
    generalized: tuple[tuple[str, str], ...] = ()

    @property
    def kind(self) -> str:
        # Mixed steps (some keywords boosted, others replaced in the same
        # iteration) are categorized under "generalize"; both lists are kept.
        if self.generalized:
            return "generalize"
        if self.reweighted:
            return "reweight"
        return "none"

    def is_noop(self) -> bool:
        return not self.reweighted and not self.generalized


NO_ACTION = PolicyAction()
