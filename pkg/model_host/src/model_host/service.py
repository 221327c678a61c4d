"""The HTTP service: four inference endpoints plus /health.

Endpoint shapes match the orchestrator's wire protocol exactly. Bodies that
fail validation come back as 400, batches beyond max_batch as 413, and
provider failures as 500 with {"error": ...}. Each model is guarded by its
provider's serialization lock, so concurrent requests are safe but at most
one inference per model runs at a time.
"""

from __future__ import annotations

import base64
import binascii
import io

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .config import HostConfig
from .providers import (
    PROMPT_METADATA_KEY,
    build_encoder,
    build_extractor,
    build_generator,
)


class ExtractRequest(BaseModel):
    prompt: str


class GenerateRequest(BaseModel):
    prompt: str
    negative_prompt: str = ""
    batch_size: int = Field(ge=1)
    seed: int = 0
    width: int = Field(default=512, ge=16, le=4096)
    height: int = Field(default=512, ge=16, le=4096)
    steps: int = Field(default=30, ge=1, le=500)


class EmbedTextRequest(BaseModel):
    texts: list[str] = Field(min_length=1)


class EmbedImageRequest(BaseModel):
    images: list[str] = Field(min_length=1)


class PayloadError(Exception):
    """Client-side payload problem that is not caught by schema validation."""


def create_app(config: HostConfig | None = None) -> FastAPI:
    config = config or HostConfig()
    app = FastAPI(title="promptloop model host", docs_url=None, redoc_url=None)

    # Models load lazily on first use so one process can host any subset.
    state: dict[str, object] = {}

    def encoder():
        if "encoder" not in state:
            state["encoder"] = build_encoder(config.encoder, config.image_size, config.device)
        return state["encoder"]

    def generator():
        if "generator" not in state:
            state["generator"] = build_generator(config.generator, config.device)
        return state["generator"]

    def extractor():
        if "extractor" not in state:
            state["extractor"] = build_extractor(config.extractor)
        return state["extractor"]

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc.errors()[:3])})

    @app.exception_handler(PayloadError)
    async def bad_payload(request: Request, exc: PayloadError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def model_failure(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"error": f"{type(exc).__name__}: {exc}"})

    def check_batch(size: int):
        if size > config.max_batch:
            raise BatchTooLarge(size)

    class BatchTooLarge(Exception):
        def __init__(self, size: int):
            self.size = size

    @app.exception_handler(BatchTooLarge)
    async def batch_too_large(request: Request, exc: BatchTooLarge):
        return JSONResponse(
            status_code=413,
            content={"error": f"batch of {exc.size} exceeds max_batch {config.max_batch}"},
        )

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "dim": encoder().dim,
            "checkpoint": {
                "encoder": encoder().checkpoint,
                "generator": config.generator,
                "extractor": config.extractor,
            },
        }

    @app.post("/v1/extract")
    def extract(body: ExtractRequest):
        keywords = extractor().complete(body.prompt)
        return {"keywords": keywords}

    @app.post("/v1/generate")
    def generate(body: GenerateRequest):
        check_batch(body.batch_size)
        payloads = generator().generate(
            body.prompt,
            body.negative_prompt,
            body.batch_size,
            body.seed,
            body.width,
            body.height,
            body.steps,
        )
        return {"images": [base64.b64encode(p).decode("ascii") for p in payloads]}

    @app.post("/v1/embed/text")
    def embed_text(body: EmbedTextRequest):
        check_batch(len(body.texts))
        rows = encoder().encode_text(body.texts)
        return {"embeddings": rows, "dim": encoder().dim}

    @app.post("/v1/embed/image")
    def embed_image(body: EmbedImageRequest):
        check_batch(len(body.images))
        images: list[Image.Image] = []
        prompts: list[str | None] = []
        for index, encoded in enumerate(body.images):
            try:
                payload = base64.b64decode(encoded, validate=True)
                image = Image.open(io.BytesIO(payload))
                image.load()
            except (binascii.Error, ValueError, UnidentifiedImageError, OSError) as exc:
                raise PayloadError(f"image {index} is not a decodable base64 image: {exc}") from exc
            images.append(image)
            prompt_text = image.info.get(PROMPT_METADATA_KEY)
            if prompt_text is None and hasattr(image, "text"):
                prompt_text = image.text.get(PROMPT_METADATA_KEY)
            prompts.append(prompt_text)
        rows = encoder().encode_images(images, prompts)
        return {"embeddings": rows, "dim": encoder().dim}

    return app
