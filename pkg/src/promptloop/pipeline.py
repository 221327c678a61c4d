"""The generate -> score -> gate -> refine loop, with tracing and persistence."""

from __future__ import annotations

import dataclasses
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendError, Extractor, Generator, Refiner, Scorer
from .dsl import compose_prompt
from .errors import (
    BatchSizeMismatch,
    MissingTrace,
    RefinerNoProgress,
    SchemaMismatch,
)
from .model import (
    NO_ACTION,
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
)
from .scoring import (
    KeywordResult,
    SentenceResult,
    SimilarityReport,
    evaluate,
    split_sentences,
)


@dataclass
class BackendSuite:
    """The four pluggable roles one run needs."""

    extractor: Extractor
    generator: Generator
    scorer: Scorer
    refiner: Refiner


@dataclass
class RefinementPolicy:
    """Chooses between boosting a failing keyword's weight and replacing it.

    Tracks per-keyword reweight attempts (keyed by case-folded phrase);
    a counter disappears when its keyword's phrase is replaced.
    """

    kind: PolicyKind = PolicyKind.REWEIGHT_THEN_GENERALIZE
    attempts: dict[str, int] = field(default_factory=dict)


def _quantized_boost(weight: float, step: float) -> float:
    # Weights live on the 4-decimal grid the prompt syntax can print, so
    # rendered prompts parse back to exactly the weights that produced them.
    return round(weight * step, 4)


def refine_step(
    keywords: KeywordSet,
    report: SimilarityReport,
    policy: RefinementPolicy,
    refiner: Refiner,
    config: RunConfig,
    context: Prompt,
) -> tuple[KeywordSet, PolicyAction]:
    """Apply one round of refinement to every failing keyword.

    Under the composite policy a keyword is reweighted until its attempt
    budget or the weight cap runs out, then handed to the refiner for a
    broader phrase (weight and counter reset). Passing keywords are never
    touched.
    """
    failing = {kr.phrase.strip().casefold() for kr in report.keyword_results if not kr.passed}
    if not failing:
        raise ValueError("refine_step requires at least one failing keyword")

    reweighted: list[str] = []
    generalized: list[tuple[str, str]] = []
    new_keywords: list[Keyword] = []

    def generalize(kw: Keyword) -> Keyword:
        replacement = refiner.refine_keyword(kw.phrase, context).strip()
        if not replacement or replacement.casefold() == kw.key:
            raise RefinerNoProgress(
                f"refiner returned {replacement!r} for {kw.phrase!r} and no reweight is available"
            )
        policy.attempts.pop(kw.key, None)
        generalized.append((kw.phrase, replacement))
        return Keyword(replacement, 1.0)

    for kw in keywords:
        if kw.key not in failing:
            new_keywords.append(kw)
            continue
        boosted = _quantized_boost(kw.weight, config.weight_step)
        cap_allows = boosted <= config.weight_cap
        if policy.kind is PolicyKind.REWEIGHT_ONLY:
            if cap_allows:
                policy.attempts[kw.key] = policy.attempts.get(kw.key, 0) + 1
                reweighted.append(kw.phrase)
                new_keywords.append(Keyword(kw.phrase, boosted))
            else:
                new_keywords.append(kw)  # capped: carried unchanged
        elif policy.kind is PolicyKind.GENERALIZE_ONLY:
            new_keywords.append(generalize(kw))
        else:
            budget_left = policy.attempts.get(kw.key, 0) < config.reweight_attempts_before_generalize
            if budget_left and cap_allows:
                policy.attempts[kw.key] = policy.attempts.get(kw.key, 0) + 1
                reweighted.append(kw.phrase)
                new_keywords.append(Keyword(kw.phrase, boosted))
            else:
                new_keywords.append(generalize(kw))

    action = PolicyAction(reweighted=tuple(reweighted), generalized=tuple(generalized))
    return KeywordSet(tuple(new_keywords)), action


def run(
    prompt: Prompt,
    config: RunConfig,
    backends: BackendSuite,
    policy_kind: PolicyKind = PolicyKind.REWEIGHT_THEN_GENERALIZE,
) -> RunTrace:
    """Execute the full loop: extract once, then generate, score, and refine
    until every keyword clears the threshold or the iteration cap hits.

    Each iteration generates with seed ^ iteration so re-rolls differ while
    staying reproducible.
    """
    keywords = backends.extractor.extract_keywords(prompt)
    policy = RefinementPolicy(kind=policy_kind)
    sentences = split_sentences(prompt.text)
    records: list[IterationRecord] = []
    outcome = Outcome.ITERATION_CAP_REACHED

    for iteration in range(config.max_iterations):
        rendered = compose_prompt(keywords)
        gen_seed = config.seed ^ iteration
        try:
            refs = backends.generator.generate(
                rendered, prompt.negative_text, config.batch_size, gen_seed
            )
            if len(refs) != config.batch_size:
                raise BatchSizeMismatch(
                    f"generator returned {len(refs)} images for batch_size {config.batch_size}"
                )
            refs = tuple(
                dataclasses.replace(
                    ref, iteration=iteration, id=_image_id(iteration, ref.index_in_batch)
                )
                for ref in refs
            )
            image_embeddings = backends.scorer.embed_image(list(refs))
            report = evaluate(
                image_embeddings, keywords, sentences, prompt.text, backends.scorer, config
            )
        except BackendError as exc:
            raise BackendError(exc.kind, f"iteration {iteration}: {exc.detail}") from exc

        used_keywords = keywords
        if report.all_passed:
            records.append(
                IterationRecord(iteration, rendered, used_keywords, refs, report, NO_ACTION)
            )
            outcome = Outcome.CONVERGED
            break
        if iteration == config.max_iterations - 1:
            records.append(
                IterationRecord(iteration, rendered, used_keywords, refs, report, NO_ACTION)
            )
            break
        try:
            keywords, action = refine_step(
                keywords, report, policy, backends.refiner, config, prompt
            )
        except BackendError as exc:
            raise BackendError(exc.kind, f"iteration {iteration}: {exc.detail}") from exc
        records.append(IterationRecord(iteration, rendered, used_keywords, refs, report, action))

    final_max = max(kr.aggregated for kr in records[-1].report.keyword_results)
    return RunTrace(
        config=config,
        initial_prompt=prompt,
        records=tuple(records),
        outcome=outcome,
        final_max_similarity=final_max,
    )


def _image_id(iteration: int, index: int) -> str:
    return f"it{iteration:02d}-im{index:02d}"


def _image_filename(iteration: int, index: int, ref: ImageRef) -> str:
    suffix = ".latent.json" if isinstance(ref.path_or_payload, Embedding) else ".png"
    return f"iter{iteration:02d}/img{index:02d}{suffix}"


def _action_to_json(action: PolicyAction) -> dict:
    kind = action.kind
    if kind == "none":
        return {"type": "none"}
    if kind == "reweight":
        return {"type": "reweight", "phrases": list(action.reweighted)}
    out = {"type": "generalize", "replacements": [list(pair) for pair in action.generalized]}
    if action.reweighted:
        out["phrases"] = list(action.reweighted)
    return out


def _action_from_json(obj: dict) -> PolicyAction:
    kind = obj.get("type")
    if kind == "none":
        return NO_ACTION
    if kind == "reweight":
        return PolicyAction(reweighted=tuple(obj.get("phrases", [])))
    if kind == "generalize":
        return PolicyAction(
            reweighted=tuple(obj.get("phrases", [])),
            generalized=tuple((old, new) for old, new in obj.get("replacements", [])),
        )
    raise SchemaMismatch(f"unknown action type {kind!r}")


def record_to_json(record: IterationRecord, image_paths: list[str]) -> dict:
    return {
        "iteration": record.iteration,
        "rendered_prompt": record.rendered_prompt,
        "keywords": [{"phrase": kw.phrase, "weight": kw.weight} for kw in record.keywords],
        "images": image_paths,
        "keyword_scores": [
            {
                "phrase": kr.phrase,
                "scores": list(kr.per_image_scores),
                "aggregated": kr.aggregated,
                "passed": kr.passed,
            }
            for kr in record.report.keyword_results
        ],
        "sentence_scores": [
            {"sentence": sr.sentence, "aggregated": sr.aggregated}
            for sr in record.report.sentence_results
        ],
        "overall": record.report.overall,
        "action": _action_to_json(record.policy_action),
    }


def persist_trace(trace: RunTrace, out_dir: str | Path) -> None:
    """Write trace.jsonl, config.json, and per-iteration image payloads.

    Output is byte-deterministic for a given trace; re-persisting the same
    trace overwrites in place.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in trace.records:
        rel_paths = []
        for ref in record.image_refs:
            rel = _image_filename(record.iteration, ref.index_in_batch, ref)
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            payload = ref.path_or_payload
            if isinstance(payload, Embedding):
                target.write_text(
                    json.dumps({"dim": payload.dim, "values": list(payload.values)}),
                    encoding="utf-8",
                )
            elif isinstance(payload, bytes):
                target.write_bytes(payload)
            else:
                if Path(payload) != target:
                    shutil.copyfile(payload, target)
            rel_paths.append(rel)
        lines.append(json.dumps(record_to_json(record, rel_paths), ensure_ascii=False))
    (out / "trace.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

    config_doc = {
        "threshold": trace.config.threshold,
        "batch_size": trace.config.batch_size,
        "max_iterations": trace.config.max_iterations,
        "weight_step": trace.config.weight_step,
        "weight_cap": trace.config.weight_cap,
        "reweight_attempts_before_generalize": trace.config.reweight_attempts_before_generalize,
        "seed": trace.config.seed,
        "aggregation": trace.config.aggregation.value,
        "strict_threshold": trace.config.strict_threshold,
        "prompt": trace.initial_prompt.text,
        "negative_prompt": trace.initial_prompt.negative_text,
        "outcome": trace.outcome.value,
        "final_max_similarity": trace.final_max_similarity,
    }
    (out / "config.json").write_text(
        json.dumps(config_doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


_RECORD_FIELDS = {
    "iteration",
    "rendered_prompt",
    "keywords",
    "images",
    "keyword_scores",
    "sentence_scores",
    "overall",
    "action",
}


def _record_from_json(obj: dict, base_dir: Path) -> IterationRecord:
    missing = _RECORD_FIELDS - obj.keys()
    if missing:
        raise SchemaMismatch(f"trace record is missing fields: {sorted(missing)}")
    try:
        keywords = KeywordSet(
            tuple(Keyword(k["phrase"], k["weight"]) for k in obj["keywords"])
        )
        keyword_results = tuple(
            KeywordResult(
                phrase=k["phrase"],
                per_image_scores=tuple(k["scores"]),
                aggregated=k["aggregated"],
                passed=k["passed"],
            )
            for k in obj["keyword_scores"]
        )
        sentence_results = tuple(
            SentenceResult(sentence=s["sentence"], aggregated=s["aggregated"])
            for s in obj["sentence_scores"]
        )
        report = SimilarityReport(
            keyword_results=keyword_results,
            sentence_results=sentence_results,
            overall=obj["overall"],
            all_passed=all(kr.passed for kr in keyword_results),
        )
        refs = []
        for index, rel in enumerate(obj["images"]):
            path = base_dir / rel
            payload: str | Embedding = str(path)
            if rel.endswith(".latent.json") and path.exists():
                data = json.loads(path.read_text(encoding="utf-8"))
                payload = Embedding(tuple(data["values"]))
            refs.append(
                ImageRef(
                    id=_image_id(obj["iteration"], index),
                    iteration=obj["iteration"],
                    index_in_batch=index,
                    path_or_payload=payload,
                )
            )
        return IterationRecord(
            iteration=obj["iteration"],
            rendered_prompt=obj["rendered_prompt"],
            keywords=keywords,
            image_refs=tuple(refs),
            report=report,
            policy_action=_action_from_json(obj["action"]),
        )
    except SchemaMismatch:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"malformed trace record: {exc}") from exc


def load_trace(trace_dir: str | Path) -> RunTrace:
    """Rebuild a RunTrace from a persisted run directory."""
    base = Path(trace_dir)
    trace_path = base / "trace.jsonl"
    if not trace_path.exists() or not trace_path.read_text(encoding="utf-8").strip():
        raise MissingTrace(f"no trace records at {trace_path}")
    records = []
    for line in trace_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"trace line is not valid JSON: {exc}") from exc
        records.append(_record_from_json(obj, base))

    config_path = base / "config.json"
    if not config_path.exists():
        raise MissingTrace(f"missing config.json next to {trace_path}")
    doc = json.loads(config_path.read_text(encoding="utf-8"))
    try:
        config = RunConfig(
            threshold=doc["threshold"],
            batch_size=doc["batch_size"],
            max_iterations=doc["max_iterations"],
            weight_step=doc["weight_step"],
            weight_cap=doc["weight_cap"],
            reweight_attempts_before_generalize=doc["reweight_attempts_before_generalize"],
            seed=doc["seed"],
            aggregation=Aggregation(doc["aggregation"]),
            strict_threshold=doc["strict_threshold"],
        )
        prompt = Prompt(doc["prompt"], doc.get("negative_prompt", ""))
        outcome = Outcome(doc["outcome"])
        final_max = doc["final_max_similarity"]
    except (KeyError, ValueError) as exc:
        raise SchemaMismatch(f"malformed config.json: {exc}") from exc
    return RunTrace(
        config=config,
        initial_prompt=prompt,
        records=tuple(records),
        outcome=outcome,
        final_max_similarity=final_max,
    )
