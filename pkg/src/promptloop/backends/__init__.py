"""Backend interface contracts plus shared backend plumbing.

Four pluggable roles drive the loop: an Extractor turns a prompt into
keywords, a Generator turns a rendered prompt into images, a Scorer embeds
images and texts into one vector space, and a Refiner proposes broader
replacements for failing keywords. Deterministic simulated implementations
live in `promptloop.backends.sim`; HTTP-backed ones in `promptloop.adapters`.
"""

from __future__ import annotations

import enum
from functools import lru_cache
from importlib import resources
from typing import Protocol, runtime_checkable

from ..errors import PromptLoopError
from ..model import Embedding, ImageRef, KeywordSet, Prompt


class BackendErrorKind(enum.Enum):
    TIMEOUT = "timeout"
    PROTOCOL = "protocol"
    MODEL_FAILURE = "model_failure"
    INVALID_RESPONSE = "invalid_response"


_RETRYABLE = {BackendErrorKind.TIMEOUT, BackendErrorKind.MODEL_FAILURE}


class BackendError(PromptLoopError):
    """A backend call failed; `retryable` follows from the failure kind."""

    def __init__(self, kind: BackendErrorKind, detail: str):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
        self.detail = detail

    @property
    def retryable(self) -> bool:
        return self.kind in _RETRYABLE


@runtime_checkable
class Extractor(Protocol):
    def extract_keywords(self, prompt: Prompt) -> KeywordSet: ...


@runtime_checkable
class Generator(Protocol):
    def generate(
        self, rendered_prompt: str, negative: str, batch_size: int, seed: int
    ) -> list[ImageRef]: ...


@runtime_checkable
class Scorer(Protocol):
    def embed_text(self, texts: list[str]) -> list[Embedding]: ...

    def embed_image(self, images: list[ImageRef]) -> list[Embedding]: ...


@runtime_checkable
class Refiner(Protocol):
    def refine_keyword(self, phrase: str, context: Prompt) -> str: ...


def _data_text(name: str) -> str:
    return resources.files("promptloop").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def stop_words() -> frozenset[str]:
    """The bundled English stop-word list, one lowercase token per line."""
    lines = _data_text("stopwords.txt").splitlines()
    return frozenset(line.strip() for line in lines if line.strip())


@lru_cache(maxsize=1)
def refiner_overrides() -> dict[str, str]:
    """Fixed phrase replacements for the simulated refiner (two-column TSV)."""
    table = {}
    for line in _data_text("refiner_overrides.tsv").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        phrase, _, replacement = line.partition("\t")
        if replacement:
            table[phrase.strip().casefold()] = replacement.strip()
    return table


@lru_cache(maxsize=1)
def extract_instruction_template() -> str:
    """The versioned instruction sent to chat-style extraction endpoints."""
    return _data_text("extract_instruction_v1.txt")


@lru_cache(maxsize=1)
def refine_instruction_template() -> str:
    """The versioned instruction asking a chat endpoint to broaden a keyword."""
    return _data_text("refine_instruction_v1.txt")


def filter_stop_words(phrases: list[str]) -> list[str]:
    """Drop single-word phrases that are stop words; multi-word phrases pass."""
    words = stop_words()
    kept = []
    for phrase in phrases:
        if " " not in phrase.strip() and phrase.strip().casefold() in words:
            continue
        kept.append(phrase)
    return kept
