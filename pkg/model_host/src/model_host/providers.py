"""Model providers behind the service endpoints.

The "toy" providers are fully deterministic and run offline: the encoder
projects token hashes into one feature space for texts and images (images
carry their generation prompt in PNG metadata, with a pixel-statistics
fallback for foreign images), and the generator renders seeded geometric
compositions with Pillow. Real checkpoints plug in through the same
factory functions; see build_encoder / build_generator.
"""

from __future__ import annotations

import hashlib
import io
import math
import random
import re
import threading

from PIL import Image, ImageDraw, PngImagePlugin

PROMPT_METADATA_KEY = "promptloop:prompt"

_WORD = re.compile(r"[\w-]+")

_STOP_WORDS = frozenset(
    """a about above after again all am an and any are as at be because been
    before being below between both but by did do does doing down during each
    few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself
    no nor not now of off on once only or other our ours ourselves out over
    own same she should so some such than that the their theirs them
    themselves then there these they this those through to too under until up
    very was we were what when where which while who whom why will with you
    your yours yourself yourselves""".split()
)

# Minimal broadening table for single-word keywords the rule below cannot
# shorten; anything unknown falls back to a generic supertype.
_HYPERNYMS = {
    "cars": "vehicles",
    "car": "vehicle",
    "castle": "building",
    "chimney": "rooftop",
    "streams": "water",
    "waterfalls": "water",
    "valleys": "landscape",
}


def tokenize(text: str) -> list[str]:
    return [m.group(0).casefold() for m in _WORD.finditer(text)]


def content_tokens(text: str) -> list[str]:
    tokens = tokenize(text)
    kept = [t for t in tokens if t not in _STOP_WORDS]
    return kept or tokens


class ToyEncoder:
    """Deterministic shared text/image feature space from token hashes.

    Every token maps to a fixed pseudo-random direction; a text encodes as
    the L2-normalized sum of its content tokens. Images generated by this
    host carry their prompt in metadata and encode through the same path,
    so image/text cosine reflects token overlap. Images without metadata
    fall back to normalized pixel statistics.
    """

    checkpoint = "toy-hash-encoder-v1"

    def __init__(self, dim: int = 256, image_size: int = 384):
        self.dim = dim
        self.image_size = image_size
        self._lock = threading.Lock()

    def _token_direction(self, token: str) -> list[float]:
        rng = random.Random(int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "big"))
        return [rng.gauss(0.0, 1.0) for _ in range(self.dim)]

    def _normalize(self, values: list[float]) -> list[float]:
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            values = [1.0] + [0.0] * (self.dim - 1)
            return values
        return [v / norm for v in values]

    def encode_text(self, texts: list[str]) -> list[list[float]]:
        with self._lock:
            rows = []
            for text in texts:
                acc = [0.0] * self.dim
                for token in content_tokens(text):
                    direction = self._token_direction(token)
                    for i in range(self.dim):
                        acc[i] += direction[i]
                rows.append(self._normalize(acc))
            return rows

    def encode_images(self, images: list[Image.Image], prompts: list[str | None]) -> list[list[float]]:
        rows = []
        for image, prompt in zip(images, prompts):
            resized = image.convert("RGB").resize((self.image_size, self.image_size))
            if prompt:
                rows.append(self.encode_text([prompt])[0])
            else:
                rows.append(self._pixel_features(resized))
        return rows

    def _pixel_features(self, image: Image.Image) -> list[float]:
        histogram = image.histogram()  # 768 buckets over RGB
        acc = [0.0] * self.dim
        for bucket, count in enumerate(histogram):
            if count:
                acc[bucket % self.dim] += count
        return self._normalize(acc)


class ToyGenerator:
    """Seeded geometric renderer producing real PNGs.

    Pixels are a deterministic function of (prompt, seed, index); the
    rendering prompt rides along in PNG metadata so the toy encoder can
    place generated images in the text feature space.
    """

    checkpoint = "toy-procedural-generator-v1"

    def __init__(self):
        self._lock = threading.Lock()

    def generate(
        self, prompt: str, negative: str, batch_size: int, seed: int, width: int, height: int, steps: int
    ) -> list[bytes]:
        with self._lock:
            return [
                self._render(prompt, seed, index, width, height) for index in range(batch_size)
            ]

    def _render(self, prompt: str, seed: int, index: int, width: int, height: int) -> bytes:
        key = f"{prompt}\x1f{seed}\x1f{index}".encode("utf-8")
        rng = random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))
        image = Image.new("RGB", (width, height), tuple(rng.randrange(40, 216) for _ in range(3)))
        draw = ImageDraw.Draw(image)
        for _ in range(8 + rng.randrange(8)):
            x0, y0 = rng.randrange(width), rng.randrange(height)
            x1, y1 = rng.randrange(width), rng.randrange(height)
            box = (min(x0, x1), min(y0, y1), max(x0, x1) + 1, max(y0, y1) + 1)
            color = tuple(rng.randrange(256) for _ in range(3))
            if rng.random() < 0.5:
                draw.ellipse(box, fill=color)
            else:
                draw.rectangle(box, fill=color)
        info = PngImagePlugin.PngInfo()
        info.add_text(PROMPT_METADATA_KEY, prompt)
        buffer = io.BytesIO()
        image.save(buffer, format="PNG", pnginfo=info)
        return buffer.getvalue()


class ToyExtractor:
    """Keyword extraction and keyword broadening from instruction prompts.

    Requests arrive as instruction text; the extractor recognizes the
    "Keyword:" line of a broadening request and the "Scene description:"
    marker of an extraction request, and otherwise treats the whole prompt
    as the scene.
    """

    checkpoint = "toy-marker-extractor-v1"

    def complete(self, prompt: str) -> list[str]:
        keyword = self._keyword_line(prompt)
        if keyword is not None:
            return [self._broaden(keyword)]
        description = self._description(prompt)
        return self._extract(description)

    @staticmethod
    def _keyword_line(prompt: str) -> str | None:
        for line in prompt.splitlines():
            if line.startswith("Keyword:"):
                return line.split(":", 1)[1].strip()
        return None

    @staticmethod
    def _description(prompt: str) -> str:
        marker = "Scene description:"
        if marker in prompt:
            return prompt.rsplit(marker, 1)[1].strip()
        return prompt

    @staticmethod
    def _broaden(phrase: str) -> str:
        segment = phrase.split(",")[-1].strip()
        tokens = segment.split()
        if len(tokens) >= 2:
            candidate = " ".join(tokens[-2:])
            if candidate.casefold() != phrase.strip().casefold():
                return candidate
            return tokens[-1]
        key = phrase.strip().casefold()
        return _HYPERNYMS.get(key, "object")

    def _extract(self, description: str) -> list[str]:
        keywords: list[str] = []
        seen: set[str] = set()
        for sentence in re.split(r"[.!?]+", description):
            for segment in re.split(r"[,;:]", sentence):
                tokens = segment.split()
                while tokens and tokens[0].casefold() in _STOP_WORDS:
                    tokens.pop(0)
                while tokens and tokens[-1].casefold() in _STOP_WORDS:
                    tokens.pop()
                if not tokens:
                    continue
                phrase = " ".join(tokens[-4:])
                key = phrase.casefold()
                if key not in seen:
                    seen.add(key)
                    keywords.append(phrase)
        return keywords[:12]


def build_encoder(spec: str, image_size: int, device: str, dim: int = 256):
    if spec == "toy":
        return ToyEncoder(dim=dim, image_size=image_size)
    return SentenceTransformerEncoder(spec, image_size, device)


def build_generator(spec: str, device: str):
    if spec == "toy":
        return ToyGenerator()
    return DiffusersGenerator(spec, device)


def build_extractor(spec: str):
    if spec == "toy":
        return ToyExtractor()
    raise ValueError(f"unknown extractor spec {spec!r}; only 'toy' ships with this host")


class SentenceTransformerEncoder:
    """CLIP-family checkpoint wrapper (requires sentence-transformers and
    downloadable weights); text and images share the model's feature space."""

    def __init__(self, checkpoint: str, image_size: int, device: str):
        from sentence_transformers import SentenceTransformer  # deferred heavy import

        self.checkpoint = checkpoint
        self.image_size = image_size
        self._model = SentenceTransformer(checkpoint, device=device)
        self.dim = self._model.get_sentence_embedding_dimension()
        self._lock = threading.Lock()

    def _normalized(self, rows) -> list[list[float]]:
        out = []
        for row in rows:
            values = [float(v) for v in row]
            norm = math.sqrt(sum(v * v for v in values)) or 1.0
            out.append([v / norm for v in values])
        return out

    def encode_text(self, texts: list[str]) -> list[list[float]]:
        with self._lock:
            return self._normalized(self._model.encode(texts))

    def encode_images(self, images, prompts) -> list[list[float]]:
        resized = [
            img.convert("RGB").resize((self.image_size, self.image_size)) for img in images
        ]
        with self._lock:
            return self._normalized(self._model.encode(resized))


class DiffusersGenerator:
    """Latent-diffusion checkpoint wrapper (requires diffusers and weights)."""

    def __init__(self, checkpoint: str, device: str):
        from diffusers import AutoPipelineForText2Image  # deferred heavy import

        self.checkpoint = checkpoint
        self._pipeline = AutoPipelineForText2Image.from_pretrained(checkpoint).to(device)
        self._lock = threading.Lock()

    def generate(self, prompt, negative, batch_size, seed, width, height, steps) -> list[bytes]:
        import torch

        with self._lock:
            generator = torch.Generator().manual_seed(seed)
            result = self._pipeline(
                prompt=prompt,
                negative_prompt=negative or None,
                num_images_per_prompt=batch_size,
                width=width,
                height=height,
                num_inference_steps=steps,
                generator=generator,
            )
        payloads = []
        for image in result.images:
            info = PngImagePlugin.PngInfo()
            info.add_text(PROMPT_METADATA_KEY, prompt)
            buffer = io.BytesIO()
            image.save(buffer, format="PNG", pnginfo=info)
            payloads.append(buffer.getvalue())
        return payloads
