"""Cosine similarity scoring, batch aggregation, and threshold gating."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .errors import DimensionMismatch, EmptyBatch, ZeroVector
from .model import (
    Aggregation,
    Embedding,
    KeywordSet,
    RunConfig,
    SimilarityScore,
    check_same_dim,
)

if TYPE_CHECKING:
    from .backends import Scorer


def cosine(a: Embedding, b: Embedding) -> SimilarityScore:
    """Cosine of the angle between two embeddings, clamped to [-1, 1].

    Symmetric bit-for-bit in its arguments; raises on mixed dimensions or a
    zero-norm input.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"cannot compare dim {a.dim} with dim {b.dim}")
    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    norm_a = math.sqrt(math.fsum(x * x for x in a.values))
    norm_b = math.sqrt(math.fsum(y * y for y in b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, dot / (norm_a * norm_b)))


def aggregate(scores: list[SimilarityScore], mode: Aggregation) -> SimilarityScore:
    if not scores:
        raise EmptyBatch("cannot aggregate an empty batch of scores")
    if mode is Aggregation.MAX_OVER_BATCH:
        return max(scores)
    return math.fsum(scores) / len(scores)


_SENTENCE_BOUNDARY = re.compile(r"[.!?]+(?=\s|$)")


def split_sentences(text: str) -> list[str]:
    """Split on '.', '!' or '?' followed by whitespace or end of text.

    Pieces are trimmed and empties dropped; a text with no terminal comes
    back whole. Abbreviations are not special-cased.
    """
    pieces = _SENTENCE_BOUNDARY.split(text)
    return [p.strip() for p in pieces if p.strip()]


@dataclass(frozen=True, slots=True)
class KeywordResult:
    phrase: str
    per_image_scores: tuple[SimilarityScore, ...]
    aggregated: SimilarityScore
    passed: bool


@dataclass(frozen=True, slots=True)
class SentenceResult:
    sentence: str
    aggregated: SimilarityScore


@dataclass(frozen=True, slots=True)
class SimilarityReport:
    """Per-keyword gated scores plus report-only sentence and overall scores."""

    keyword_results: tuple[KeywordResult, ...]
    sentence_results: tuple[SentenceResult, ...]
    overall: SimilarityScore
    all_passed: bool

    def __post_init__(self):
        if self.all_passed != all(kr.passed for kr in self.keyword_results):
            raise ValueError("all_passed must equal the conjunction of keyword pass flags")


def gate(aggregated: SimilarityScore, config: RunConfig) -> bool:
    """A keyword passes when its aggregated score clears the threshold
    (strictly above it under strict_threshold)."""
    if config.strict_threshold:
        return aggregated > config.threshold
    return aggregated >= config.threshold


def evaluate(
    image_embeddings: list[Embedding],
    keywords: KeywordSet,
    sentences: list[str],
    full_text: str,
    text_encoder: "Scorer",
    config: RunConfig,
) -> SimilarityReport:
    """Score every keyword, sentence, and the full description against a batch
    of image embeddings.

    Only keywords are gated against the threshold; sentence and overall
    scores are informational. Deterministic for deterministic encoders.
    """
    if not image_embeddings:
        raise EmptyBatch("evaluate needs at least one image embedding")
    check_same_dim(image_embeddings)

    phrases = list(keywords.phrases())
    texts = phrases + list(sentences) + [full_text]
    text_embeddings = text_encoder.embed_text(texts)
    keyword_embs = text_embeddings[: len(phrases)]
    sentence_embs = text_embeddings[len(phrases) : len(phrases) + len(sentences)]
    full_emb = text_embeddings[-1]

    keyword_results = []
    for phrase, emb in zip(phrases, keyword_embs):
        scores = tuple(cosine(img, emb) for img in image_embeddings)
        agg = aggregate(list(scores), config.aggregation)
        keyword_results.append(
            KeywordResult(phrase=phrase, per_image_scores=scores, aggregated=agg, passed=gate(agg, config))
        )

    sentence_results = []
    for sentence, emb in zip(sentences, sentence_embs):
        scores = [cosine(img, emb) for img in image_embeddings]
        sentence_results.append(
            SentenceResult(sentence=sentence, aggregated=aggregate(scores, config.aggregation))
        )

    overall = aggregate([cosine(img, full_emb) for img in image_embeddings], config.aggregation)

    return SimilarityReport(
        keyword_results=tuple(keyword_results),
        sentence_results=tuple(sentence_results),
        overall=overall,
        all_passed=all(kr.passed for kr in keyword_results),
    )
