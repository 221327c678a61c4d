"""model_host against the orchestrator's wire contract and its own invariants."""

import base64
import io
import math
import threading
import time

import pytest
import requests
import uvicorn
from PIL import Image

from model_host.config import HostConfig
from model_host.providers import ToyExtractor, ToyGenerator
from model_host.service import create_app

from promptloop.adapters import EndpointConfig, http_embed_image, http_embed_text
from promptloop.model import Prompt
from promptloop.pipeline import run as run_pipeline
from promptloop.testing import run_wire_conformance


class LiveServer:
    def __init__(self, config: HostConfig):
        self.server = uvicorn.Server(
            uvicorn.Config(create_app(config), host="127.0.0.1", port=0, log_level="error")
        )
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        self.port = self.server.servers[0].sockets[0].getsockname()[1]
        self.url = f"http://127.0.0.1:{self.port}"

    def close(self):
        self.server.should_exit = True
        self.thread.join(timeout=5)


@pytest.fixture(scope="module")
def live():
    server = LiveServer(HostConfig(max_batch=32))
    yield server
    server.close()


def test_health_reports_dim_and_checkpoint(live):
    response = requests.get(f"{live.url}/health", timeout=5)
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert isinstance(body["dim"], int) and body["dim"] >= 1
    assert body["checkpoint"]["encoder"] == "toy-hash-encoder-v1"


def test_adapter_contract_suite_passes_unmodified(live, tmp_path):
    passed = run_wire_conformance(live.url, work_dir=tmp_path)
    assert len(passed) == 5


def test_embedding_rows_unit_norm(live):
    cfg = EndpointConfig(base_url=live.url)
    rows = http_embed_text(["castle", "a submarine at depth", "neon city"], cfg)
    for row in rows:
        norm = math.sqrt(sum(v * v for v in row.values))
        assert abs(norm - 1.0) <= 1e-4


def test_identical_texts_encode_identically(live):
    response = requests.post(
        f"{live.url}/v1/embed/text", json={"texts": ["castle", "castle"]}, timeout=5
    )
    rows = response.json()["embeddings"]
    assert rows[0] == rows[1]


def test_castle_vs_submarine_ordering(live, tmp_path):
    """A generated castle image must score closer to "castle" than to "submarine"."""
    cfg = EndpointConfig(base_url=live.url)
    from promptloop.adapters import txt2img_generate

    refs = txt2img_generate("castle on a hill", "", 1, seed=5, cfg=cfg, out_dir=tmp_path)
    [image_emb] = http_embed_image([str(refs[0].path_or_payload)], cfg)
    castle, submarine = http_embed_text(["castle", "submarine"], cfg)

    def cosine(a, b):
        return sum(x * y for x, y in zip(a.values, b.values))

    assert cosine(image_emb, castle) > cosine(image_emb, submarine) + 0.2


def test_shape_discipline(live):
    response = requests.post(
        f"{live.url}/v1/embed/text", json={"texts": ["a", "b", "c"]}, timeout=5
    )
    body = response.json()
    assert len(body["embeddings"]) == 3
    assert all(len(row) == body["dim"] for row in body["embeddings"])


def test_batch_above_max_is_413(live):
    response = requests.post(
        f"{live.url}/v1/embed/text", json={"texts": ["x"] * 33}, timeout=5
    )
    assert response.status_code == 413
    response = requests.post(
        f"{live.url}/v1/generate",
        json={"prompt": "x", "batch_size": 33, "seed": 0},
        timeout=5,
    )
    assert response.status_code == 413


def test_malformed_bodies_are_400(live):
    response = requests.post(f"{live.url}/v1/extract", json={"wrong": 1}, timeout=5)
    assert response.status_code == 400
    response = requests.post(f"{live.url}/v1/embed/text", json={"texts": []}, timeout=5)
    assert response.status_code == 400
    response = requests.post(
        f"{live.url}/v1/embed/image", json={"images": ["not-base64!"]}, timeout=5
    )
    assert response.status_code == 400
    assert "error" in response.json()


def test_generation_is_deterministic_per_seed(live):
    def fetch(seed):
        response = requests.post(
            f"{live.url}/v1/generate",
            json={"prompt": "castle", "batch_size": 2, "seed": seed},
            timeout=10,
        )
        assert response.status_code == 200
        return response.json()["images"]

    assert fetch(7) == fetch(7)
    assert fetch(7) != fetch(8)


def test_generated_png_decodes_and_carries_prompt(live):
    response = requests.post(
        f"{live.url}/v1/generate",
        json={"prompt": "misty forest", "batch_size": 1, "seed": 1},
        timeout=10,
    )
    payload = base64.b64decode(response.json()["images"][0])
    image = Image.open(io.BytesIO(payload))
    assert image.size == (512, 512)
    assert image.text.get("promptloop:prompt") == "misty forest"


def test_foreign_image_without_metadata_still_embeds(live):
    buffer = io.BytesIO()
    Image.new("RGB", (64, 64), (200, 30, 30)).save(buffer, format="PNG")
    encoded = base64.b64encode(buffer.getvalue()).decode("ascii")
    response = requests.post(
        f"{live.url}/v1/embed/image", json={"images": [encoded]}, timeout=5
    )
    assert response.status_code == 200
    [row] = response.json()["embeddings"]
    norm = math.sqrt(sum(v * v for v in row))
    assert abs(norm - 1.0) <= 1e-4


def test_full_refinement_loop_against_live_host(live, tmp_path):
    """End to end: the orchestrator drives this service through a whole run."""
    from promptloop.adapters import http_backend_suite
    from promptloop.model import PolicyKind, RunConfig

    cfg = EndpointConfig(base_url=live.url)
    endpoints = {role: cfg for role in ("extract", "generate", "embed", "refine")}
    suite, transcript = http_backend_suite(endpoints, tmp_path / "run")
    config = RunConfig(batch_size=2, max_iterations=2, seed=11)
    prompt = Prompt("A stone castle above a misty forest at dawn.")
    trace = run_pipeline(prompt, config, suite, policy_kind=PolicyKind.REWEIGHT_ONLY)
    assert trace.records
    assert transcript


def test_provider_failure_maps_to_500():
    broken = LiveServer(HostConfig(extractor="no-such-extractor"))
    try:
        response = requests.post(
            f"{broken.url}/v1/extract", json={"prompt": "scene"}, timeout=5
        )
        assert response.status_code == 500
        assert "error" in response.json()
    finally:
        broken.close()


# ----------------------------------------------------------- provider units


def test_toy_extractor_broadens_multiword():
    extractor = ToyExtractor()
    [replacement] = extractor.complete("Keyword: ancient stone castle\n\nScene description:\nx")
    assert replacement == "stone castle"


def test_toy_extractor_broadens_single_word_via_table():
    extractor = ToyExtractor()
    [replacement] = extractor.complete("Keyword: cars\n\nScene description:\nx")
    assert replacement == "vehicles"


def test_toy_extractor_pulls_description_after_marker():
    extractor = ToyExtractor()
    keywords = extractor.complete(
        "Reply with keywords.\n\nScene description:\nA neon-lit alley, crowded streets."
    )
    assert "neon-lit alley" in keywords
    assert "crowded streets" in keywords


def test_toy_generator_deterministic_bytes():
    generator = ToyGenerator()
    first = generator.generate("castle", "", 2, 3, 512, 512, 30)
    second = generator.generate("castle", "", 2, 3, 512, 512, 30)
    assert first == second
    assert first[0] != first[1]
