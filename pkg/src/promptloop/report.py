"""Keyword and sentence similarity tables over one or more run traces.

The keyword table shows each run's aggregated score per keyword with a "*"
marker (and red, on terminals) on failing cells; the sentence table marks
the best score per row in bold. CSV output is the long form
keyword,run_label,aggregated,passed and re-ingests losslessly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .model import RunTrace

CSV_COLUMNS = ["keyword", "run_label", "aggregated", "passed"]

_RED = "\x1b[31m"
_BOLD = "\x1b[1m"
_RESET = "\x1b[0m"


def format_score(value: float) -> str:
    return f"{value:.4f}"


@dataclass(frozen=True)
class KeywordCell:
    aggregated: float
    passed: bool


def keyword_table(traces: list[tuple[str, RunTrace]]) -> tuple[list[str], list[tuple[str, list[KeywordCell | None]]]]:
    """Rows of (keyword, one cell per labeled run), keywords in first-seen order.

    Each run contributes its final iteration's report."""
    labels = [label for label, _ in traces]
    order: list[str] = []
    cells: dict[str, list[KeywordCell | None]] = {}
    for column, (_, trace) in enumerate(traces):
        report = trace.records[-1].report
        for kr in report.keyword_results:
            if kr.phrase not in cells:
                order.append(kr.phrase)
                cells[kr.phrase] = [None] * len(traces)
            cells[kr.phrase][column] = KeywordCell(kr.aggregated, kr.passed)
    return labels, [(phrase, cells[phrase]) for phrase in order]


def sentence_table(traces: list[tuple[str, RunTrace]]) -> tuple[list[str], list[tuple[str, list[float | None]]]]:
    """Rows of (sentence, score per run) plus a final "Overall" row."""
    labels = [label for label, _ in traces]
    order: list[str] = []
    values: dict[str, list[float | None]] = {}
    for column, (_, trace) in enumerate(traces):
        report = trace.records[-1].report
        for sr in report.sentence_results:
            if sr.sentence not in values:
                order.append(sr.sentence)
                values[sr.sentence] = [None] * len(traces)
            values[sr.sentence][column] = sr.aggregated
    rows = [(sentence, values[sentence]) for sentence in order]
    rows.append(("Overall", [trace.records[-1].report.overall for _, trace in traces]))
    return labels, rows


def _md_row(cells: list[str]) -> str:
    return "| " + " | ".join(cells) + " |"


def render_keyword_markdown(traces: list[tuple[str, RunTrace]], color: bool = False) -> str:
    labels, rows = keyword_table(traces)
    lines = [_md_row(["keyword"] + labels), _md_row(["---"] * (len(labels) + 1))]
    for phrase, cells in rows:
        rendered = []
        for cell in cells:
            if cell is None:
                rendered.append("")
                continue
            text = format_score(cell.aggregated)
            if not cell.passed:
                text += "*"
                if color:
                    text = f"{_RED}{text}{_RESET}"
            rendered.append(text)
        lines.append(_md_row([phrase] + rendered))
    return "\n".join(lines)


def render_sentence_markdown(traces: list[tuple[str, RunTrace]]) -> str:
    labels, rows = sentence_table(traces)
    lines = [_md_row(["sentence"] + labels), _md_row(["---"] * (len(labels) + 1))]
    for sentence, scores in rows:
        present = [s for s in scores if s is not None]
        best = max(present) if present else None
        rendered = []
        for score in scores:
            if score is None:
                rendered.append("")
            elif score == best and len(present) > 1:
                rendered.append(f"**{format_score(score)}**")
            else:
                rendered.append(format_score(score))
        lines.append(_md_row([sentence] + rendered))
    return "\n".join(lines)


def render_markdown(traces: list[tuple[str, RunTrace]], color: bool = False) -> str:
    sections = [render_keyword_markdown(traces, color=color)]
    if any(trace.records[-1].report.sentence_results for _, trace in traces):
        sections.append(render_sentence_markdown(traces))
    return "\n\n".join(sections)


def render_csv(traces: list[tuple[str, RunTrace]]) -> str:
    labels, rows = keyword_table(traces)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for phrase, cells in rows:
        for label, cell in zip(labels, cells):
            if cell is None:
                continue
            writer.writerow(
                [phrase, label, format_score(cell.aggregated), "true" if cell.passed else "false"]
            )
    return buffer.getvalue()


def read_csv(text: str) -> list[dict[str, str]]:
    """Re-ingest render_csv output; values come back exactly as rendered."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV columns: {reader.fieldnames}")
    return list(reader)
