"""Deterministic simulated backends operating in a shared latent space.

Every distinct token gets its own orthonormal basis direction, so cosine
similarities are analytically predictable: with noise off and all keywords
included at weights w, cosine(image, keyword_k) == w_k / ||w||_2 exactly.
Keywords below the inclusion threshold are dropped from an image by a
seeded coin flip, which is what the refinement loop exists to fix.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
import string
import threading
from dataclasses import dataclass, field

from ..dsl import decompose_keywords, parse
from ..errors import NoKeywordsExtracted, VocabularyExhausted
from ..model import Embedding, ImageRef, Keyword, KeywordSet, Prompt
from . import (
    BackendError,
    BackendErrorKind,
    refiner_overrides,
    stop_words,
)

_TOKEN_SPLIT = re.compile(r"[,\s]+")
_EDGE_PUNCT = string.punctuation.replace("-", "")


def tokenize(text: str) -> list[str]:
    """Case-folded word tokens; commas and edge punctuation stripped,
    inner hyphens kept."""
    tokens = []
    for raw in _TOKEN_SPLIT.split(text):
        token = raw.strip(_EDGE_PUNCT).casefold()
        if token:
            tokens.append(token)
    return tokens


def _uniform(*parts) -> float:
    """Deterministic uniform draw in [0, 1) keyed on the given parts."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _derived_seed(*parts) -> int:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


@dataclass
class SimWorld:
    """Shared latent space for one run's simulated backends.

    Tokens are mapped to basis directions in first-seen order; the last
    axis is reserved as the background direction emitted when an image
    ends up with no content at all.
    """

    dim: int = 64
    seed: int = 0
    inclusion_threshold: float = 1.05
    noise_sigma: float = 0.0
    missing_phrases: frozenset[str] = frozenset()
    _directions: dict[str, int] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("sim world needs dim >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(
            self, "missing_phrases", frozenset(p.casefold() for p in self.missing_phrases)
        )

    def direction_index(self, token: str) -> int:
        with self._lock:
            if token in self._directions:
                return self._directions[token]
            index = len(self._directions)
            if index >= self.dim - 1:  # last axis reserved for background
                raise VocabularyExhausted(
                    f"sim world of dim {self.dim} cannot hold a {index + 1}th phrase token"
                )
            self._directions[token] = index
            return index

    def content_tokens(self, text: str) -> list[str]:
        tokens = tokenize(text)
        content = [t for t in tokens if t not in stop_words()]
        return content or tokens

    def text_unit_vector(self, text: str) -> Embedding:
        """Normalized sum of the non-stop-word token directions of `text`."""
        values = [0.0] * self.dim
        for token in self.content_tokens(text):
            values[self.direction_index(token)] += 1.0
        norm = math.sqrt(math.fsum(v * v for v in values))
        if norm == 0.0:
            return self.background_vector()
        return Embedding(tuple(v / norm for v in values))

    def background_vector(self) -> Embedding:
        values = [0.0] * self.dim
        values[self.dim - 1] = 1.0
        return Embedding(tuple(values))


class SimExtractor:
    """Splits the prompt into word tokens and filters stop words."""

    def extract_keywords(self, prompt: Prompt) -> KeywordSet:
        words = stop_words()
        seen = set()
        kept: list[Keyword] = []
        for raw in _TOKEN_SPLIT.split(prompt.text):
            token = raw.strip(_EDGE_PUNCT)
            if not token:
                continue
            key = token.casefold()
            if key in words or key in seen:
                continue
            seen.add(key)
            kept.append(Keyword(token))
        if not kept:
            raise NoKeywordsExtracted(f"no keywords left in {prompt.text!r} after filtering")
        return KeywordSet(tuple(kept))


class SimGenerator:
    """Emits latent embeddings instead of pixels.

    Each image is normalize(sum_k c_k * u_k + noise) over the weighted
    keywords recovered from the rendered prompt, where c_k = w_k when the
    weight clears the inclusion threshold and otherwise w_k times a seeded
    fair coin. Missing phrases never contribute.
    """

    def __init__(self, world: SimWorld):
        self.world = world

    def generate(
        self, rendered_prompt: str, negative: str, batch_size: int, seed: int
    ) -> list[ImageRef]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        world = self.world
        pairs = decompose_keywords(parse(rendered_prompt))
        directions = [
            (phrase, weight, world.text_unit_vector(phrase)) for phrase, weight in pairs
        ]
        refs = []
        for index in range(batch_size):
            values = [0.0] * world.dim
            for phrase, weight, unit in directions:
                key = phrase.casefold()
                if key in world.missing_phrases:
                    continue
                if weight >= world.inclusion_threshold:
                    coefficient = weight
                elif _uniform(world.seed, seed, index, "include", key) < 0.5:
                    coefficient = weight
                else:
                    continue
                for axis, component in enumerate(unit.values):
                    if component:
                        values[axis] += coefficient * component
            if world.noise_sigma > 0:
                rng = random.Random(_derived_seed(world.seed, seed, index, "noise"))
                for axis in range(world.dim):
                    values[axis] += rng.gauss(0.0, world.noise_sigma)
            norm = math.sqrt(math.fsum(v * v for v in values))
            if norm == 0.0:
                latent = world.background_vector()
            else:
                latent = Embedding(tuple(v / norm for v in values))
            refs.append(
                ImageRef(
                    id=f"sim-{seed}-{index}",
                    iteration=0,
                    index_in_batch=index,
                    path_or_payload=latent,
                )
            )
        return refs


class SimScorer:
    """Embeds texts as token-direction sums and passes latents through."""

    def __init__(self, world: SimWorld):
        self.world = world

    def embed_text(self, texts: list[str]) -> list[Embedding]:
        if not texts:
            raise ValueError("embed_text needs at least one text")
        return [self.world.text_unit_vector(t) for t in texts]

    def embed_image(self, images: list[ImageRef]) -> list[Embedding]:
        if not images:
            raise ValueError("embed_image needs at least one image")
        out = []
        for ref in images:
            latent = ref.latent
            if latent is None:
                latent = _load_latent_file(ref)
            if latent is None:
                raise BackendError(
                    BackendErrorKind.INVALID_RESPONSE,
                    f"sim scorer can only embed latent payloads, got {ref.id}",
                )
            out.append(latent)
        return out


def _load_latent_file(ref: ImageRef) -> Embedding | None:
    path = ref.path_or_payload
    if not isinstance(path, str) or not path.endswith(".latent.json"):
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return Embedding(tuple(payload["values"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise BackendError(
            BackendErrorKind.INVALID_RESPONSE, f"unreadable latent file {path}: {exc}"
        ) from exc


class SimRefiner:
    """Broadens a phrase by keeping the head of its final comma segment."""

    def refine_keyword(self, phrase: str, context: Prompt) -> str:
        override = refiner_overrides().get(phrase.strip().casefold())
        if override is not None:
            return override
        segment = phrase.split(",")[-1].strip()
        tokens = segment.split()
        if not tokens:
            return phrase
        return " ".join(tokens[-2:])


def sim_backend_suite(world: SimWorld | None = None):
    """Extractor, generator, scorer, and refiner sharing one world."""
    from ..pipeline import BackendSuite

    world = world or SimWorld()
    return BackendSuite(
        extractor=SimExtractor(),
        generator=SimGenerator(world),
        scorer=SimScorer(world),
        refiner=SimRefiner(),
    )
