"""Iterative prompt-refinement engine for text-to-image generation.

The loop extracts keywords from a scene description, renders them as an
attention-weighted prompt, generates a batch of images, scores keyword/image
alignment by cosine similarity over embeddings, and reweights or generalizes
failing keywords until every one clears the similarity threshold.
"""

from .backends import BackendError, BackendErrorKind, Extractor, Generator, Refiner, Scorer
from .model import (
    Aggregation,
    Embedding,
    ImageRef,
    IterationRecord,
    Keyword,
    KeywordSet,
    Outcome,
    PolicyAction,
    PolicyKind,
    Prompt,
    RunConfig,
    RunTrace,
    default_config,
    validate_prompt,
)
from .pipeline import BackendSuite, RefinementPolicy, load_trace, persist_trace, refine_step, run
from .scoring import SimilarityReport, aggregate, cosine, evaluate, split_sentences

__version__ = "0.1.0"

__all__ = [
    "Aggregation",
    "BackendError",
    "BackendErrorKind",
    "BackendSuite",
    "Embedding",
    "Extractor",
    "Generator",
    "ImageRef",
    "IterationRecord",
    "Keyword",
    "KeywordSet",
    "Outcome",
    "PolicyAction",
    "PolicyKind",
    "Prompt",
    "Refiner",
    "RefinementPolicy",
    "RunConfig",
    "RunTrace",
    "Scorer",
    "SimilarityReport",
    "aggregate",
    "cosine",
    "default_config",
    "evaluate",
    "load_trace",
    "persist_trace",
    "refine_step",
    "run",
    "split_sentences",
    "validate_prompt",
]
