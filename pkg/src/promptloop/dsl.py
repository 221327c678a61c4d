"""Attention-weight prompt syntax: parsing, canonical rendering, rewriting.

Grammar accepted by parse():

    (X)      emphasize X by 1.1
    [X]      de-emphasize X by 1/1.1 (so "([X])" cancels exactly)
    (X:w)    explicit positive decimal weight w
    \\( \\) \\[ \\] \\\\   literal delimiter / backslash

Nesting multiplies weights. Inside "(...)" only the suffix after the last
top-level colon is read as a weight, and only when it looks numeric; any
other colon is plain text. Everything else is plain text.

The canonical form produced by render() uses explicit "(X:w)" groups with
weights printed at up to four fractional digits, weight-1 spans as bare
text, and delimiters escaped; parse(render(a)) == normalize(a).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidWeightLiteral, UnbalancedDelimiter, UnknownKeyword, WeightAboveCap
from .model import DEFAULT_WEIGHT_CAP, Keyword, KeywordSet

EMPHASIS_WEIGHT = 1.1
DEEMPHASIS_WEIGHT = 1.0 / 1.1

_ESCAPABLE = "()[]\\"
_WEIGHT_CHARS = set("0123456789.+-eE")
# Products drifting this close to 1.0 are snapped so cancelling pairs vanish.
_UNIT_SNAP = 1e-12


@dataclass(frozen=True, slots=True)
class TextSpan:
    text: str


@dataclass(frozen=True, slots=True)
class Weighted:
    children: tuple["Node", ...]
    weight: float


Node = TextSpan | Weighted


@dataclass(frozen=True, slots=True)
class WeightedPromptAst:
    nodes: tuple[Node, ...]


class _Frame:
    __slots__ = ("opener", "open_pos", "children", "buffer", "last_colon_pos")

    def __init__(self, opener: str | None, open_pos: int):
        self.opener = opener
        self.open_pos = open_pos
        self.children: list[Node] = []
        self.buffer: list[str] = []
        self.last_colon_pos = -1

    def flush(self):
        if self.buffer:
            self.children.append(TextSpan("".join(self.buffer)))
            self.buffer.clear()


def _parse_weight_suffix(frame: _Frame) -> tuple[list[Node], float | None]:
    """Split an explicit weight off a closing paren group, if one is present."""
    children = frame.children
    if not children or not isinstance(children[-1], TextSpan):
        return children, None
    text = children[-1].text
    idx = text.rfind(":")
    if idx < 0:
        return children, None
    candidate = text[idx + 1 :].strip()
    if not candidate or not set(candidate) <= _WEIGHT_CHARS:
        return children, None
    try:
        weight = float(candidate)
    except ValueError:
        raise InvalidWeightLiteral(
            f"invalid weight literal {candidate!r} at byte {frame.last_colon_pos}",
            frame.last_colon_pos,
        ) from None
    if not weight > 0 or weight == float("inf"):
        raise InvalidWeightLiteral(
            f"weight must be positive and finite, got {candidate!r} at byte {frame.last_colon_pos}",
            frame.last_colon_pos,
        )
    remaining = text[:idx]
    kept = children[:-1]
    if remaining:
        kept = kept + [TextSpan(remaining)]
    return kept, weight


def parse(text: str) -> WeightedPromptAst:
    """Parse prompt syntax into an AST, raising structured errors on bad input."""
    root = _Frame(None, 0)
    stack = [root]
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        top = stack[-1]
        if ch == "\\":
            if i + 1 < n and text[i + 1] in _ESCAPABLE:
                top.buffer.append(text[i + 1])
                i += 2
                continue
            top.buffer.append("\\")
            i += 1
            continue
        if ch in "([":
            top.flush()
            stack.append(_Frame(ch, i))
            i += 1
            continue
        if ch in ")]":
            expected = "(" if ch == ")" else "["
            if top.opener != expected:
                raise UnbalancedDelimiter(f"unbalanced {ch!r} at byte {i}", i)
            top.flush()
            stack.pop()
            if ch == ")":
                children, weight = _parse_weight_suffix(top)
                node = Weighted(tuple(children), weight if weight is not None else EMPHASIS_WEIGHT)
            else:
                node = Weighted(tuple(top.children), DEEMPHASIS_WEIGHT)
            stack[-1].children.append(node)
            i += 1
            continue
        if ch == ":":
            top.last_colon_pos = i
        top.buffer.append(ch)
        i += 1
    if len(stack) > 1:
        raise UnbalancedDelimiter(f"unclosed {stack[-1].opener!r} at byte {n}", n)
    root.flush()
    return WeightedPromptAst(tuple(root.children))


def _effective_runs(nodes: tuple[Node, ...], mult: float) -> list[tuple[str, float]]:
    runs: list[tuple[str, float]] = []
    for node in nodes:
        if isinstance(node, TextSpan):
            runs.append((node.text, mult))
        else:
            runs.extend(_effective_runs(node.children, mult * node.weight))
    return runs


def effective_runs(ast: WeightedPromptAst) -> list[tuple[str, float]]:
    """Each text run with the product of its enclosing weights."""
    return _effective_runs(ast.nodes, 1.0)


def normalize(ast: WeightedPromptAst) -> WeightedPromptAst:
    """Collapse nesting into flat runs: weights multiplied through, adjacent
    equal-weight spans merged, weight-1 wrappers removed, empty spans dropped."""
    merged: list[tuple[str, float]] = []
    for text, weight in effective_runs(ast):
        if not text:
            continue
        if abs(weight - 1.0) <= _UNIT_SNAP:
            weight = 1.0
        if merged and merged[-1][1] == weight:
            merged[-1] = (merged[-1][0] + text, weight)
        else:
            merged.append((text, weight))
    nodes: list[Node] = []
    for text, weight in merged:
        if weight == 1.0:
            nodes.append(TextSpan(text))
        else:
            nodes.append(Weighted((TextSpan(text),), weight))
    return WeightedPromptAst(tuple(nodes))


def format_weight(weight: float) -> str:
    """Up to four fractional digits, trailing zeros trimmed."""
    return f"{weight:.4f}".rstrip("0").rstrip(".")


def escape_text(text: str) -> str:
    out = []
    for ch in text:
        if ch in _ESCAPABLE:
            out.append("\\")
        out.append(ch)
    return "".join(out)


def render(ast: WeightedPromptAst) -> str:
    """Canonical text for an AST; always the normalized explicit-weight form."""
    parts = []
    for node in normalize(ast).nodes:
        if isinstance(node, TextSpan):
            parts.append(escape_text(node.text))
        else:
            inner = "".join(escape_text(c.text) for c in node.children if isinstance(c, TextSpan))
            parts.append(f"({inner}:{format_weight(node.weight)})")
    return "".join(parts)


def compose_prompt(keywords: KeywordSet) -> str:
    """Join keywords with ", ", wrapping weighted or comma-bearing phrases
    in explicit-weight groups so parsing recovers each phrase exactly."""
    if len(keywords) == 0:
        raise ValueError("cannot compose a prompt from an empty keyword set")
    parts = []
    for kw in keywords:
        escaped = escape_text(kw.phrase)
        if kw.weight != 1.0 or "," in kw.phrase:
            parts.append(f"({escaped}:{format_weight(kw.weight)})")
        else:
            parts.append(escaped)
    return ", ".join(parts)


def set_weight(
    keywords: KeywordSet,
    phrase: str,
    weight: float,
    weight_cap: float = DEFAULT_WEIGHT_CAP,
) -> KeywordSet:
    """Return a copy of the set with one keyword's weight replaced."""
    if weight > weight_cap:
        raise WeightAboveCap(f"weight {weight} exceeds cap {weight_cap}")
    key = phrase.strip().casefold()
    if keywords.get(phrase) is None:
        raise UnknownKeyword(phrase)
    changed = tuple(
        Keyword(kw.phrase, weight) if kw.key == key else kw for kw in keywords
    )
    return KeywordSet(changed)


def decompose_keywords(ast: WeightedPromptAst) -> list[tuple[str, float]]:
    """Recover (phrase, effective weight) pairs from a parsed prompt.

    Group edges and weight changes are phrase boundaries; commas split
    phrases only outside groups, so composed comma-bearing phrases survive
    the round trip.
    """
    tokens: list[tuple[str, float, int]] = []  # (text, weight, group id)

    def walk(nodes: tuple[Node, ...], mult: float, group: int):
        nonlocal next_group
        for node in nodes:
            if isinstance(node, TextSpan):
                tokens.append((node.text, mult, group))
            else:
                next_group += 1
                walk(node.children, mult * node.weight, next_group)

    next_group = 0
    walk(ast.nodes, 1.0, 0)

    phrases: list[tuple[str, float]] = []
    parts: list[str] = []
    current: tuple[float, int] | None = None

    def finalize():
        nonlocal parts
        phrase = "".join(parts).strip()
        parts = []
        if phrase:
            phrases.append((phrase, current[0]))

    for text, weight, group in tokens:
        if current is not None and (weight, group) != current:
            finalize()
        current = (weight, group)
        if group == 0:
            pieces = text.split(",")
            for j, piece in enumerate(pieces):
                if j > 0:
                    finalize()
                parts.append(piece)
        else:
            parts.append(text)
    if current is not None:
        finalize()
    return phrases
