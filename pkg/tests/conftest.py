import json
import math
from pathlib import Path

import pytest

from promptloop.model import Embedding

DATA_DIR = Path(__file__).parent / "data"


def write_fixture_trace(
    out_dir: Path,
    keyword_scores: dict[str, float],
    sentence_scores: dict[str, float] | None = None,
    overall: float = 0.0,
    threshold: float = 0.2,
    prompt: str = "fixture scene description",
) -> Path:
    """Write a schema-conformant single-record run directory from raw scores."""
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "iteration": 0,
        "rendered_prompt": ", ".join(keyword_scores),
        "keywords": [{"phrase": p, "weight": 1.0} for p in keyword_scores],
        "images": [],
        "keyword_scores": [
            {"phrase": p, "scores": [s], "aggregated": s, "passed": s > threshold}
            for p, s in keyword_scores.items()
        ],
        "sentence_scores": [
            {"sentence": s, "aggregated": v} for s, v in (sentence_scores or {}).items()
        ],
        "overall": overall,
        "action": {"type": "none"},
    }
    (out_dir / "trace.jsonl").write_text(json.dumps(record) + "\n", encoding="utf-8")
    config = {
        "threshold": threshold,
        "batch_size": 1,
        "max_iterations": 8,
        "weight_step": 1.1,
        "weight_cap": 1.5,
        "reweight_attempts_before_generalize": 2,
        "seed": 0,
        "aggregation": "max_over_batch",
        "strict_threshold": True,
        "prompt": prompt,
        "negative_prompt": "",
        "outcome": "iteration_cap_reached",
        "final_max_similarity": max(keyword_scores.values(), default=0.0),
    }
    (out_dir / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return out_dir


@pytest.fixture(scope="session")
def keyword_gate_fixture():
    return json.loads((DATA_DIR / "keyword_gate_scores.json").read_text(encoding="utf-8"))


class TableDrivenScorer:
    """Maps each text to a 2-d embedding whose cosine against (1, 0) equals
    the score recorded for it; unknown texts land at the image axis."""

    def __init__(self, scores: dict[str, float]):
        self.scores = scores

    @staticmethod
    def image_embedding() -> Embedding:
        return Embedding((1.0, 0.0))

    def embed_text(self, texts):
        out = []
        for text in texts:
            s = self.scores.get(text)
            if s is None:
                out.append(Embedding((1.0, 0.0)))
            else:
                out.append(Embedding((s, math.sqrt(1.0 - s * s))))
        return out

    def embed_image(self, images):
        return [self.image_embedding() for _ in images]
