"""Command-line entry point: run the loop, score artifacts, inspect prompts,
and render report tables from persisted traces.

Exit codes: 0 success/converged, 1 runtime error, 2 usage or validation
error, 3 run stopped at the iteration cap.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import report as report_mod
from .adapters import EndpointConfig, HttpScorer, dump_transcript, http_backend_suite
from .backends.sim import SimScorer, SimWorld, sim_backend_suite
from .dsl import decompose_keywords, normalize, parse, render
from .errors import (
    ConfigInvalid,
    DslParseError,
    EmptyPrompt,
    InvalidCharacters,
    MissingTrace,
    PromptLoopError,
    SchemaMismatch,
)
from .model import (
    NO_ACTION,
    Aggregation,
    Embedding,
    ImageRef,
    IterationRecord,
    KeywordSet,
    Outcome,
    PolicyKind,
    Prompt,
    RunConfig,
    RunTrace,
    validate_prompt,
)
from .pipeline import persist_trace, run
from .pipeline import load_trace as load_trace_dir
from .scoring import evaluate

_RUN_CONFIG_KEYS = {
    "threshold",
    "batch_size",
    "max_iterations",
    "weight_step",
    "weight_cap",
    "reweight_attempts_before_generalize",
    "seed",
    "aggregation",
    "strict_threshold",
}
_TOP_KEYS = _RUN_CONFIG_KEYS | {
    "prompt",
    "negative_prompt",
    "out_dir",
    "backend",
    "policy",
    "sim",
    "endpoints",
}
_SIM_KEYS = {"dim", "seed", "noise_sigma", "inclusion_threshold", "missing_phrases"}
_ENDPOINT_ROLES = {"extract", "generate", "embed", "refine"}
_ENDPOINT_KEYS = {"base_url", "api_key", "timeout_ms", "max_retries", "backoff_base_ms"}
_GENERATOR_EXTRA_KEYS = {"width", "height", "steps"}


def load_config_file(path: str | Path) -> dict:
    """Parse and validate the JSON config document; unknown keys are errors."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigInvalid("config file must hold a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigInvalid(f"unknown config key: {key!r}")
    sim = doc.get("sim", {})
    if not isinstance(sim, dict):
        raise ConfigInvalid("config key 'sim' must be an object")
    for key in sim:
        if key not in _SIM_KEYS:
            raise ConfigInvalid(f"unknown config key: 'sim.{key}'")
    endpoints = doc.get("endpoints", {})
    if not isinstance(endpoints, dict):
        raise ConfigInvalid("config key 'endpoints' must be an object")
    for role, block in endpoints.items():
        if role not in _ENDPOINT_ROLES:
            raise ConfigInvalid(f"unknown config key: 'endpoints.{role}'")
        if not isinstance(block, dict):
            raise ConfigInvalid(f"config key 'endpoints.{role}' must be an object")
        allowed = _ENDPOINT_KEYS | (_GENERATOR_EXTRA_KEYS if role == "generate" else set())
        for key in block:
            if key not in allowed:
                raise ConfigInvalid(f"unknown config key: 'endpoints.{role}.{key}'")
    return doc


def build_run_config(doc: dict, overrides: dict) -> RunConfig:
    merged = {k: doc[k] for k in _RUN_CONFIG_KEYS if k in doc}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "aggregation" in merged and isinstance(merged["aggregation"], str):
        try:
            merged["aggregation"] = Aggregation(merged["aggregation"])
        except ValueError as exc:
            raise ConfigInvalid(f"unknown aggregation {merged['aggregation']!r}") from exc
    return RunConfig(**merged)


def build_sim_world(doc: dict) -> SimWorld:
    sim = dict(doc.get("sim", {}))
    if "missing_phrases" in sim:
        sim["missing_phrases"] = frozenset(sim["missing_phrases"])
    return SimWorld(**sim)


def build_endpoints(doc: dict) -> tuple[dict[str, EndpointConfig], dict]:
    blocks = doc.get("endpoints", {})
    missing = _ENDPOINT_ROLES - blocks.keys()
    if missing:
        raise ConfigInvalid(f"http backend needs endpoint blocks: {sorted(missing)}")
    endpoints = {}
    generator_options = {}
    for role, block in blocks.items():
        block = dict(block)
        if role == "generate":
            generator_options = {
                k: block.pop(k) for k in list(_GENERATOR_EXTRA_KEYS) if k in block
            }
        endpoints[role] = EndpointConfig(**block)
    return endpoints, generator_options


def _policy_kind(doc: dict) -> PolicyKind:
    name = doc.get("policy", PolicyKind.REWEIGHT_THEN_GENERALIZE.value)
    try:
        return PolicyKind(name)
    except ValueError as exc:
        raise ConfigInvalid(f"unknown policy {name!r}") from exc


@click.group()
def main():
    """Iterative prompt-refinement loop for text-to-image generation."""


@main.command("run")
@click.option("--prompt", "prompt_text", default=None, help="Scene description to draw.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Run output directory.")
@click.option("--backend", type=click.Choice(["sim", "http"]), default=None, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--threshold", type=float, default=None)
@click.option("--batch", "batch_size", type=int, default=None)
@click.option("--max-iter", "max_iterations", type=int, default=None)
@click.pass_context
def cmd_run(ctx, prompt_text, config_path, out_dir, backend, seed, threshold, batch_size, max_iterations):
    """Run the full generate-score-refine loop and persist its trace."""
    try:
        doc = load_config_file(config_path) if config_path else {}
        prompt_text = prompt_text or doc.get("prompt")
        if not prompt_text:
            raise click.UsageError("no prompt given: pass --prompt or a config file with one")
        out_dir = out_dir or doc.get("out_dir")
        if not out_dir:
            raise click.UsageError("no output directory: pass --out or set out_dir in the config")
        backend = backend or doc.get("backend", "sim")
        config = build_run_config(
            doc,
            {
                "seed": seed,
                "threshold": threshold,
                "batch_size": batch_size,
                "max_iterations": max_iterations,
            },
        )
        prompt = validate_prompt(prompt_text, doc.get("negative_prompt", ""))
        policy = _policy_kind(doc)
    except (ConfigInvalid, EmptyPrompt, InvalidCharacters) as exc:
        raise click.UsageError(str(exc)) from exc

    transcript = None
    world = None
    try:
        if backend == "sim":
            world = build_sim_world(doc)
            suite = sim_backend_suite(world)
        else:
            endpoints, generator_options = build_endpoints(doc)
            suite, transcript = http_backend_suite(endpoints, out_dir, generator_options=generator_options)
        trace = run(prompt, config, suite, policy_kind=policy)
        persist_trace(trace, out_dir)
        if world is not None:
            _dump_sim_vocab(world, Path(out_dir) / "sim_vocab.json")
    except ConfigInvalid as exc:
        raise click.UsageError(str(exc)) from exc
    except (PromptLoopError, OSError) as exc:
        if transcript:
            dump_transcript(transcript, Path(out_dir) / "http_log.jsonl")
        raise click.ClickException(str(exc)) from exc
    if transcript:
        dump_transcript(transcript, Path(out_dir) / "http_log.jsonl")

    label = "Converged" if trace.outcome is Outcome.CONVERGED else "Cap"
    click.echo(f"outcome={label} iters={len(trace.records)} max_sim={trace.final_max_similarity:.4f}")
    ctx.exit(0 if trace.outcome is Outcome.CONVERGED else 3)


def _dump_sim_vocab(world: SimWorld, path: Path) -> None:
    doc = {"dim": world.dim, "directions": dict(world._directions)}
    path.write_text(json.dumps(doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def _load_sim_vocab(world: SimWorld, path: Path) -> None:
    doc = json.loads(path.read_text(encoding="utf-8"))
    world._directions.update({str(k): int(v) for k, v in doc.get("directions", {}).items()})


@main.command("report")
@click.option(
    "--trace",
    "trace_dirs",
    type=click.Path(),
    multiple=True,
    required=True,
    help="Run directory holding trace.jsonl; repeat for side-by-side columns.",
)
@click.option("--label", "labels", multiple=True, help="Column label per --trace, in order.")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md", show_default=True)
@click.option("--color/--no-color", default=None, help="Mark failing cells in red (default: on TTY).")
def cmd_report(trace_dirs, labels, fmt, color):
    """Render keyword and sentence similarity tables from saved traces."""
    if labels and len(labels) != len(trace_dirs):
        raise click.UsageError("--label must be given once per --trace")
    pairs = []
    try:
        for index, trace_dir in enumerate(trace_dirs):
            label = labels[index] if labels else Path(trace_dir).name
            pairs.append((label, load_trace_dir(trace_dir)))
    except (MissingTrace, SchemaMismatch) as exc:
        raise click.ClickException(str(exc)) from exc
    if fmt == "csv":
        click.echo(report_mod.render_csv(pairs), nl=False)
    else:
        use_color = sys.stdout.isatty() if color is None else color
        click.echo(report_mod.render_markdown(pairs, color=use_color))


@main.command("score")
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--keywords", "keywords_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--backend", type=click.Choice(["sim", "http"]), default="sim", show_default=True)
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file (http endpoints, sim block).")
@click.option("--threshold", type=float, default=None)
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md", show_default=True)
def cmd_score(images_dir, keywords_file, backend, config_path, threshold, fmt):
    """One-shot scoring of existing images against a keyword list (no loop)."""
    phrases = [
        line.strip()
        for line in Path(keywords_file).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not phrases:
        raise click.UsageError(f"keywords file {keywords_file} is empty")
    try:
        doc = load_config_file(config_path) if config_path else {}
        config = build_run_config(doc, {"threshold": threshold, "batch_size": 1})
    except ConfigInvalid as exc:
        raise click.UsageError(str(exc)) from exc

    keywords = KeywordSet.from_phrases(phrases)
    images = Path(images_dir)
    try:
        if backend == "sim":
            world = build_sim_world(doc)
            vocab = images / "sim_vocab.json"
            if not vocab.exists():
                vocab = images.parent / "sim_vocab.json"
            if vocab.exists():
                _load_sim_vocab(world, vocab)
            scorer = SimScorer(world)
            refs = _latent_refs(images)
        else:
            endpoints, _ = build_endpoints(doc)
            scorer = HttpScorer(endpoints["embed"])
            refs = _png_refs(images)
        if not refs:
            raise click.UsageError(f"no scoreable images under {images_dir}")
        embeddings = scorer.embed_image(refs)
        similarity = evaluate(embeddings, keywords, [], ", ".join(phrases), scorer, config)
    except ConfigInvalid as exc:
        raise click.UsageError(str(exc)) from exc
    except PromptLoopError as exc:
        raise click.ClickException(str(exc)) from exc

    trace_like = [("score", _single_record_trace(similarity, config))]
    if fmt == "csv":
        click.echo(report_mod.render_csv(trace_like), nl=False)
    else:
        click.echo(report_mod.render_keyword_markdown(trace_like))


def _latent_refs(images_dir: Path) -> list[ImageRef]:
    refs = []
    for index, path in enumerate(sorted(images_dir.rglob("*.latent.json"))):
        data = json.loads(path.read_text(encoding="utf-8"))
        refs.append(
            ImageRef(
                id=path.stem,
                iteration=0,
                index_in_batch=index,
                path_or_payload=Embedding(tuple(data["values"])),
            )
        )
    return refs


def _png_refs(images_dir: Path) -> list[ImageRef]:
    return [
        ImageRef(id=path.stem, iteration=0, index_in_batch=index, path_or_payload=str(path))
        for index, path in enumerate(sorted(images_dir.rglob("*.png")))
    ]


def _single_record_trace(similarity, config):
    # Wrap a one-shot report in the trace shape the report renderers expect.
    prompt = Prompt("ad hoc scoring run")
    record = IterationRecord(
        iteration=0,
        rendered_prompt="",
        keywords=KeywordSet(()),
        image_refs=(),
        report=similarity,
        policy_action=NO_ACTION,
    )
    return RunTrace(
        config=config,
        initial_prompt=prompt,
        records=(record,),
        outcome=Outcome.ITERATION_CAP_REACHED,
        final_max_similarity=max((kr.aggregated for kr in similarity.keyword_results), default=0.0),
    )


@main.command("parse")
@click.argument("text")
def cmd_parse(text):
    """Parse prompt syntax, print the normalized form and effective weights."""
    try:
        tree = parse(text)
    except DslParseError as exc:
        click.echo(text, err=True)
        click.echo(" " * exc.position + "^", err=True)
        click.echo(f"{type(exc).__name__} at byte {exc.position}", err=True)
        raise SystemExit(1)
    click.echo(f"normalized: {render(normalize(tree))}")
    click.echo("keyword weights:")
    for phrase, weight in decompose_keywords(tree):
        click.echo(f"  {phrase} = {weight}")


if __name__ == "__main__":
    main()
