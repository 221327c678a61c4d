"""HTTP client implementations of the four backend interfaces.

Wire protocol (JSON field names are contractual):

    POST /v1/extract      {"prompt": str}                       -> {"keywords": [str]}
    POST /v1/generate     {"prompt", "negative_prompt",
                           "batch_size", "seed",
                           "width", "height", "steps"}          -> {"images": [b64 png]}
    POST /v1/embed/text   {"texts": [str]}                      -> {"embeddings": [[num]], "dim": int}
    POST /v1/embed/image  {"images": [b64 png]}                 -> {"embeddings": [[num]], "dim": int}

Auth is `Authorization: Bearer <api_key>` when a key is configured; the
PROMPTLOOP_API_KEY environment variable overrides any configured key.
Keyword extraction and refinement both ride the extract endpoint with a
versioned instruction prompt and a tolerant completion parser.

Retryable failures (timeouts, connection drops, HTTP 5xx/408/429) are
retried with exponential backoff; protocol and validation failures surface
immediately. Every request/response is recorded in a transcript with the
api key redacted before anything is stored.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlparse

import requests

from .backends import (
    BackendError,
    BackendErrorKind,
    extract_instruction_template,
    filter_stop_words,
    refine_instruction_template,
)
from .errors import BatchSizeMismatch, ConfigInvalid, DimensionMismatch, NoKeywordsExtracted
from .model import Embedding, ImageRef, Keyword, KeywordSet, Prompt

API_KEY_ENV = "PROMPTLOOP_API_KEY"
REDACTED = "***REDACTED***"

# Transcript entries keep bodies verbatim up to this many characters per
# string; larger blobs (base64 images) are cut after redaction.
_LOG_STRING_LIMIT = 2048


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: str | None = None
    timeout_ms: int = 60_000
    max_retries: int = 2
    backoff_base_ms: int = 500

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigInvalid(f"base_url must be an absolute http(s) URL, got {self.base_url!r}")
        if self.timeout_ms <= 0:
            raise ConfigInvalid("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ConfigInvalid("max_retries must be non-negative")
        if self.backoff_base_ms <= 0:
            raise ConfigInvalid("backoff_base_ms must be positive")

    def resolved_api_key(self) -> str | None:
        return os.environ.get(API_KEY_ENV) or self.api_key


def _redact(value, secret: str | None):
    if isinstance(value, str):
        if secret:
            value = value.replace(secret, REDACTED)
        if len(value) > _LOG_STRING_LIMIT:
            value = value[:_LOG_STRING_LIMIT] + f"...[+{len(value) - _LOG_STRING_LIMIT} chars]"
        return value
    if isinstance(value, dict):
        return {k: _redact(v, secret) for k, v in value.items()}
    if isinstance(value, list):
        return [_redact(v, secret) for v in value]
    return value


def dump_transcript(transcript: list, path: str | Path) -> None:
    """Write a redacted request/response transcript as JSON lines."""
    lines = [json.dumps(entry, ensure_ascii=False) for entry in transcript]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


class HttpClient:
    """Shared POST-JSON plumbing: auth, retries with backoff, transcript."""

    def __init__(
        self,
        cfg: EndpointConfig,
        session: requests.Session | None = None,
        sleeper=time.sleep,
        transcript: list | None = None,
    ):
        self.cfg = cfg
        self.session = session or requests.Session()
        self.sleeper = sleeper
        self.transcript = transcript if transcript is not None else []

    def _record(self, url: str, body, status, response_body, error: str | None = None):
        secret = self.cfg.resolved_api_key()
        entry = {
            "seq": len(self.transcript),
            "method": "POST",
            "url": _redact(url, secret),
            "request": _redact(body, secret),
            "status": status,
            "response": _redact(response_body, secret),
        }
        if error:
            entry["error"] = _redact(error, secret)
        self.transcript.append(entry)

    def dump_transcript(self, path: str | Path) -> None:
        dump_transcript(self.transcript, path)

    def post_json(self, path: str, body: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + path
        headers = {}
        api_key = self.cfg.resolved_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        attempt = 0
        while True:
            error: BackendError
            try:
                response = self.session.post(
                    url, json=body, headers=headers, timeout=self.cfg.timeout_ms / 1000
                )
            except requests.Timeout as exc:
                error = BackendError(BackendErrorKind.TIMEOUT, f"request timed out: {exc}")
                self._record(url, body, None, None, error=str(error))
            except requests.ConnectionError as exc:
                error = BackendError(BackendErrorKind.TIMEOUT, f"connection failed: {exc}")
                self._record(url, body, None, None, error=str(error))
            else:
                status = response.status_code
                text = response.text
                self._record(url, body, status, text)
                if status >= 500:
                    error = BackendError(BackendErrorKind.MODEL_FAILURE, f"HTTP {status}: {text[:200]}")
                elif status in (408, 429):
                    error = BackendError(BackendErrorKind.TIMEOUT, f"HTTP {status}")
                elif status >= 400:
                    raise BackendError(BackendErrorKind.PROTOCOL, f"HTTP {status}: {text[:200]}")
                else:
                    try:
                        parsed = response.json()
                    except ValueError as exc:
                        raise BackendError(
                            BackendErrorKind.PROTOCOL, f"non-JSON body: {exc}"
                        ) from exc
                    if not isinstance(parsed, dict):
                        raise BackendError(BackendErrorKind.PROTOCOL, "response is not a JSON object")
                    return parsed
            if error.retryable and attempt < self.cfg.max_retries:
                self.sleeper(self.cfg.backoff_base_ms * (2**attempt) / 1000)
                attempt += 1
                continue
            raise error


# ------------------------------------------------------------- extraction


_SPLIT_COMPLETION = re.compile(r"[,\n]+")


def parse_keyword_completion(pieces: list[str]) -> list[str]:
    """Tolerant parse of a chat completion into keyword phrases: split on
    commas/newlines, trim, drop empties, dedup case-folded, filter stop words."""
    phrases = []
    seen = set()
    for piece in pieces:
        for part in _SPLIT_COMPLETION.split(piece):
            phrase = part.strip().strip("\"'").strip()
            if not phrase:
                continue
            key = phrase.casefold()
            if key in seen:
                continue
            seen.add(key)
            phrases.append(phrase)
    return filter_stop_words(phrases)


def chat_extract(prompt: Prompt, cfg: EndpointConfig, client: HttpClient | None = None) -> KeywordSet:
    client = client or HttpClient(cfg)
    instruction = extract_instruction_template().format(description=prompt.text)
    response = client.post_json("/v1/extract", {"prompt": instruction})
    keywords = response.get("keywords")
    if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
        raise BackendError(BackendErrorKind.INVALID_RESPONSE, "keywords must be a list of strings")
    phrases = parse_keyword_completion(keywords)
    if not phrases:
        raise NoKeywordsExtracted("extraction endpoint returned no usable keywords")
    return KeywordSet(tuple(Keyword(p) for p in phrases))


def chat_generalize(
    phrase: str, context: Prompt, cfg: EndpointConfig, client: HttpClient | None = None
) -> str:
    client = client or HttpClient(cfg)
    instruction = refine_instruction_template().format(phrase=phrase, description=context.text)
    response = client.post_json("/v1/extract", {"prompt": instruction})
    keywords = response.get("keywords")
    if not isinstance(keywords, list) or not keywords or not isinstance(keywords[0], str):
        raise BackendError(BackendErrorKind.INVALID_RESPONSE, "refinement returned no completion")
    completion = keywords[0].strip()
    replacement = completion.splitlines()[0].strip() if completion else ""
    replacement = replacement.strip("\"'").strip(" .,;:")
    if not replacement:
        raise BackendError(BackendErrorKind.INVALID_RESPONSE, "refinement returned an empty phrase")
    if replacement.casefold() == phrase.strip().casefold():
        raise BackendError(
            BackendErrorKind.INVALID_RESPONSE,
            f"refinement returned the input phrase {phrase!r} unchanged",
        )
    return replacement


# ------------------------------------------------------------- generation


def txt2img_generate(
    rendered_prompt: str,
    negative: str,
    batch_size: int,
    seed: int,
    cfg: EndpointConfig,
    out_dir: str | Path,
    client: HttpClient | None = None,
    width: int = 512,
    height: int = 512,
    steps: int = 30,
) -> list[ImageRef]:
    client = client or HttpClient(cfg)
    body = {
        "prompt": rendered_prompt,
        "negative_prompt": negative,
        "batch_size": batch_size,
        "seed": seed,
        "width": width,
        "height": height,
        "steps": steps,
    }
    response = client.post_json("/v1/generate", body)
    images = response.get("images")
    if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
        raise BackendError(BackendErrorKind.INVALID_RESPONSE, "images must be a list of strings")
    if len(images) != batch_size:
        raise BatchSizeMismatch(f"asked for {batch_size} images, got {len(images)}")

    staging = Path(out_dir) / "staging"
    staging.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    refs: list[ImageRef] = []
    try:
        for index, encoded in enumerate(images):
            try:
                payload = base64.b64decode(encoded, validate=True)
            except (binascii.Error, ValueError) as exc:
                raise BackendError(
                    BackendErrorKind.INVALID_RESPONSE, f"image {index} is not valid base64: {exc}"
                ) from exc
            target = staging / f"gen-{seed}-{index:02d}.png"
            target.write_bytes(payload)
            written.append(target)
            refs.append(
                ImageRef(
                    id=f"gen-{seed}-{index:02d}",
                    iteration=0,
                    index_in_batch=index,
                    path_or_payload=str(target),
                )
            )
    except Exception:
        for path in written:  # no partial effects on error
            path.unlink(missing_ok=True)
        raise
    return refs


# -------------------------------------------------------------- embedding


def _validate_embedding_matrix(response: dict, expected_rows: int) -> list[Embedding]:
    rows = response.get("embeddings")
    dim = response.get("dim")
    if not isinstance(rows, list) or not isinstance(dim, int):
        raise BackendError(
            BackendErrorKind.INVALID_RESPONSE, "embedding response needs embeddings + dim"
        )
    if len(rows) != expected_rows:
        raise BackendError(
            BackendErrorKind.INVALID_RESPONSE,
            f"expected {expected_rows} embedding rows, got {len(rows)}",
        )
    out = []
    for row in rows:
        if not isinstance(row, list) or len(row) != dim:
            raise DimensionMismatch(f"ragged embedding row: expected dim {dim}")
        out.append(Embedding(tuple(float(v) for v in row)))
    return out


def http_embed_text(
    texts: list[str], cfg: EndpointConfig, client: HttpClient | None = None
) -> list[Embedding]:
    if not texts:
        raise ValueError("embed_text needs at least one text")
    client = client or HttpClient(cfg)
    response = client.post_json("/v1/embed/text", {"texts": list(texts)})
    return _validate_embedding_matrix(response, len(texts))


def http_embed_image(
    image_paths: list[str], cfg: EndpointConfig, client: HttpClient | None = None
) -> list[Embedding]:
    if not image_paths:
        raise ValueError("embed_image needs at least one image")
    client = client or HttpClient(cfg)
    encoded = []
    for path in image_paths:
        encoded.append(base64.b64encode(Path(path).read_bytes()).decode("ascii"))
    response = client.post_json("/v1/embed/image", {"images": encoded})
    return _validate_embedding_matrix(response, len(image_paths))


# ------------------------------------------------------- interface classes


class HttpExtractor:
    def __init__(self, cfg: EndpointConfig, client: HttpClient | None = None):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)

    def extract_keywords(self, prompt: Prompt) -> KeywordSet:
        return chat_extract(prompt, self.cfg, self.client)


class HttpRefiner:
    def __init__(self, cfg: EndpointConfig, client: HttpClient | None = None):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)

    def refine_keyword(self, phrase: str, context: Prompt) -> str:
        return chat_generalize(phrase, context, self.cfg, self.client)


class HttpGenerator:
    def __init__(
        self,
        cfg: EndpointConfig,
        out_dir: str | Path,
        client: HttpClient | None = None,
        width: int = 512,
        height: int = 512,
        steps: int = 30,
    ):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.client = client or HttpClient(cfg)
        self.width = width
        self.height = height
        self.steps = steps

    def generate(self, rendered_prompt: str, negative: str, batch_size: int, seed: int):
        return txt2img_generate(
            rendered_prompt,
            negative,
            batch_size,
            seed,
            self.cfg,
            self.out_dir,
            self.client,
            width=self.width,
            height=self.height,
            steps=self.steps,
        )


class HttpScorer:
    """Embedding client; large batches can be split into chunks dispatched
    concurrently (at most `parallelism` in flight)."""

    def __init__(
        self,
        cfg: EndpointConfig,
        client: HttpClient | None = None,
        chunk_size: int | None = None,
        parallelism: int = 4,
    ):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)
        self.chunk_size = chunk_size
        self.parallelism = max(1, parallelism)

    def _chunked(self, items: list, call) -> list[Embedding]:
        if not self.chunk_size or len(items) <= self.chunk_size:
            return call(items)
        chunks = [
            items[i : i + self.chunk_size] for i in range(0, len(items), self.chunk_size)
        ]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            results = list(pool.map(call, chunks))
        return [emb for chunk in results for emb in chunk]

    def embed_text(self, texts: list[str]) -> list[Embedding]:
        return self._chunked(list(texts), lambda chunk: http_embed_text(chunk, self.cfg, self.client))

    def embed_image(self, images: list[ImageRef]) -> list[Embedding]:
        paths = []
        for ref in images:
            if not isinstance(ref.path_or_payload, str):
                raise BackendError(
                    BackendErrorKind.INVALID_RESPONSE,
                    f"http scorer needs image files on disk, got {ref.id}",
                )
            paths.append(ref.path_or_payload)
        return self._chunked(paths, lambda chunk: http_embed_image(chunk, self.cfg, self.client))


def http_backend_suite(
    endpoints: dict[str, EndpointConfig],
    out_dir: str | Path,
    transcript: list | None = None,
    generator_options: dict | None = None,
):
    """Build the four adapters, sharing one transcript for http_log dumping."""
    from .pipeline import BackendSuite

    transcript = transcript if transcript is not None else []
    clients = {
        role: HttpClient(cfg, transcript=transcript) for role, cfg in endpoints.items()
    }
    options = generator_options or {}
    return (
        BackendSuite(
            extractor=HttpExtractor(endpoints["extract"], clients["extract"]),
            generator=HttpGenerator(
                endpoints["generate"], out_dir, clients["generate"], **options
            ),
            scorer=HttpScorer(endpoints["embed"], clients["embed"]),
            refiner=HttpRefiner(endpoints["refine"], clients["refine"]),
        ),
        transcript,
    )
