"""Wire-protocol conformance checks for backend services.

`run_wire_conformance` drives the four HTTP endpoints through the real
adapter clients against any base URL and asserts the protocol contract:
shapes, dimensional consistency, determinism of repeated encodings, and
PNG payloads from the generator. It returns the list of checks that ran;
any violation raises AssertionError (or a BackendError from the adapters).
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from .adapters import (
    EndpointConfig,
    chat_extract,
    chat_generalize,
    http_embed_image,
    http_embed_text,
    txt2img_generate,
)
from .model import Prompt, check_same_dim

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

CONFORMANCE_SCENE = (
    "A stone castle above a misty forest at dawn, banners in the wind. "
    "A narrow bridge crosses the river below."
)


def run_wire_conformance(
    base_url: str,
    api_key: str | None = None,
    work_dir: str | Path | None = None,
    batch_size: int = 2,
) -> list[str]:
    cfg = EndpointConfig(base_url=base_url, api_key=api_key)
    passed: list[str] = []
    cleanup = None
    if work_dir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="wire-conformance-")
        work_dir = cleanup.name
    try:
        keywords = chat_extract(Prompt(CONFORMANCE_SCENE), cfg)
        assert len(keywords) >= 1, "extraction must yield at least one keyword"
        assert all(kw.weight == 1.0 for kw in keywords), "extracted keywords start unweighted"
        passed.append("extract: non-empty deduplicated keywords")

        refs = txt2img_generate("castle, forest, bridge", "", batch_size, 7, cfg, work_dir)
        assert len(refs) == batch_size, "generator must honor batch_size"
        assert [r.index_in_batch for r in refs] == list(range(batch_size))
        for ref in refs:
            payload = Path(ref.path_or_payload).read_bytes()
            assert payload.startswith(PNG_MAGIC), "generated images must be PNG"
        passed.append("generate: batch count and PNG payloads")

        texts = ["castle", "submarine", "castle"]
        text_embs = http_embed_text(texts, cfg)
        assert len(text_embs) == len(texts)
        dim = check_same_dim(text_embs)
        assert text_embs[0] == text_embs[2], "identical texts must encode identically"
        passed.append("embed_text: shape and determinism")

        image_embs = http_embed_image([str(r.path_or_payload) for r in refs], cfg)
        assert len(image_embs) == batch_size
        assert check_same_dim(image_embs) == dim, "text and image features must share one space"
        passed.append("embed_image: shape matches text space")

        replacement = chat_generalize("ancient stone castle", Prompt(CONFORMANCE_SCENE), cfg)
        assert replacement.strip(), "refinement must return a phrase"
        assert replacement.casefold() != "ancient stone castle"
        passed.append("refine: returns a different phrase")
    finally:
        if cleanup is not None:
            cleanup.cleanup()
    return passed
