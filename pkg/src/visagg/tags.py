"""Parse and emit the structured output format.

The wire contract is three lowercase tag pairs in fixed order::

    <think> r </think>
    <visual_keys> ["object_1", "object_2"] </visual_keys>
    <answer> a </answer>

The key section may be absent (initial generations only carry think/answer).
Parsing tolerates the drifted spellings ``<visual_key>`` and
``<final_answer>`` and canonicalizes them; emission always uses the canonical
spellings above.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import VisaggError

# Canonical tag name -> accepted spellings, first spelling is canonical.
_ALIASES: dict[str, tuple[str, ...]] = {
    "think": ("think",),
    "visual_keys": ("visual_keys", "visual_key"),
    "answer": ("answer", "final_answer"),
}

_QUOTES = ("\"", "'")


class ParseError(VisaggError):
    """Base class for structured-output parsing failures."""


class MissingTag(ParseError):
    def __init__(self, name: str):
        super().__init__(f"missing tag: <{name}>")
        self.name = name


class UnclosedTag(ParseError):
    def __init__(self, name: str):
        super().__init__(f"unclosed or nested tag: <{name}>")
        self.name = name


class MalformedKeyList(ParseError):
    def __init__(self, detail: str):
        super().__init__(f"malformed key list: {detail}")
        self.detail = detail


class EmptyField(VisaggError):
    def __init__(self, name: str):
        super().__init__(f"field must be non-empty: {name}")
        self.name = name


@dataclass(frozen=True)
class TagSpan:
    """Byte range of one tag body within the UTF-8 encoding of the source."""

    name: str
    start: int
    end: int


@dataclass(frozen=True)
class ParsedOutput:
    """Extracted (think, visual_keys, answer) triple with source spans.

    ``visual_keys`` is None when the section was absent and a list (possibly
    empty, case-folded, deduplicated, in first-occurrence order) when present.
    ``spans`` are in document order, non-overlapping, and slicing the UTF-8
    encoded source with them reproduces the raw tag bodies byte-exactly.
    """

    think: str
    visual_keys: list[str] | None
    answer: str
    spans: tuple[TagSpan, ...]


def _find_pair(text: str, name: str, start: int) -> tuple[str, int, int] | None:
    """Locate the first tag pair for ``name`` at or after ``start``.

    Returns (raw_body, body_start, body_end) in character offsets, or None
    when no opening tag exists. An opening tag without a closing tag, or with
    another identical opening nested in the body, raises UnclosedTag.
    """
    best: tuple[int, str] | None = None
    for alias in _ALIASES[name]:
        pos = text.find(f"<{alias}>", start)
        if pos != -1 and (best is None or pos < best[0]):
            best = (pos, alias)
    if best is None:
        return None
    open_pos, alias = best
    open_tag, close_tag = f"<{alias}>", f"</{alias}>"
    body_start = open_pos + len(open_tag)
    close_pos = text.find(close_tag, body_start)
    if close_pos == -1:
        raise UnclosedTag(name)
    body = text[body_start:close_pos]
    if open_tag in body:
        raise UnclosedTag(name)
    return body, body_start, close_pos


def _split_list_items(inner: str) -> list[str]:
    """Split a bracketed list body on commas, honoring quoted items."""
    items: list[str] = []
    buf: list[str] = []
    quote: str | None = None
    for ch in inner:
        if quote is not None:
            buf.append(ch)
            if ch == quote:
                quote = None
        elif ch in _QUOTES:
            quote = ch
            buf.append(ch)
        elif ch == ",":
            items.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if quote is not None:
        raise MalformedKeyList("unbalanced quote")
    items.append("".join(buf))
    return items


def _unquote_item(item: str) -> str:
    s = item.strip()
    if len(s) >= 2 and s[0] in _QUOTES and s[-1] == s[0]:
        return s[1:-1]
    if any(q in s for q in _QUOTES):
        raise MalformedKeyList(f"stray quote in item: {item!r}")
    return s


def parse_key_list(body: str) -> list[str]:
    """Parse a key-section body into a clean list of key strings.

    Accepts a bracketed quoted list (the instructed format), a bracketed list
    of bare tokens, or a bare comma-separated fallback. Keys are case-folded,
    trimmed, deduplicated, and returned in first-occurrence order.
    """
    s = body.strip()
    if not s:
        return []
    if s.startswith("["):
        if not s.endswith("]"):
            raise MalformedKeyList("unterminated bracket")
        inner = s[1:-1]
        raw_items = _split_list_items(inner) if inner.strip() else []
    else:
        raw_items = s.split(",")
    keys: list[str] = []
    seen: set[str] = set()
    for item in raw_items:
        key = _unquote_item(item).strip().casefold()
        if key and key not in seen:
            seen.add(key)
            keys.append(key)
    return keys


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def parse_output(text: str, require_keys: bool = False) -> ParsedOutput:
    """Extract the first well-formed think/visual_keys/answer sections.

    Sections are located in document order: the key section is searched after
    the think section and the answer after whichever of those came last, so
    the reported spans are non-overlapping and ordered. Text outside the
    recognized tags is ignored. When ``require_keys`` is false a missing key
    section yields ``visual_keys=None``.
    """
    think_found = _find_pair(text, "think", 0)
    if think_found is None:
        raise MissingTag("think")
    think_body, think_start, think_end = think_found
    cursor = think_end

    keys: list[str] | None = None
    key_span: tuple[str, int, int] | None = None
    keys_found = _find_pair(text, "visual_keys", cursor)
    if keys_found is not None:
        key_body, key_start, key_end = keys_found
        keys = parse_key_list(key_body)
        key_span = (key_body, key_start, key_end)
        cursor = key_end
    elif require_keys:
        raise MissingTag("visual_keys")

    answer_found = _find_pair(text, "answer", cursor)
    if answer_found is None:
        raise MissingTag("answer")
    answer_body, answer_start, answer_end = answer_found

    spans = [TagSpan("think", _byte_offset(text, think_start), _byte_offset(text, think_end))]
    if key_span is not None:
        spans.append(
            TagSpan("visual_keys", _byte_offset(text, key_span[1]), _byte_offset(text, key_span[2]))
        )
    spans.append(TagSpan("answer", _byte_offset(text, answer_start), _byte_offset(text, answer_end)))

    return ParsedOutput(
        think=think_body.strip(),
        visual_keys=keys,
        answer=answer_body.strip(),
        spans=tuple(spans),
    )


def find_keys(text: str) -> list[str] | None:
    """Return the key list from the first parseable key section, if any.

    Unlike parse_output this does not require think/answer sections; it is
    the cheap probe used when deciding how to extract objects from a raw
    trajectory. Returns None when no well-formed key section exists.
    """
    try:
        found = _find_pair(text, "visual_keys", 0)
        if found is None:
            return None
        return parse_key_list(found[0])
    except ParseError:
        return None


def emit_output(think: str, keys: set[str] | frozenset[str] | list[str] | None, answer: str) -> str:
    """Render the canonical three-section output.

    Keys are case-folded, deduplicated, and sorted so emission is
    deterministic; ``keys=None`` omits the section entirely. Round-trips
    through parse_output for texts that do not themselves embed tag markers
    (and keys free of quotes, commas, and brackets).
    """
    think = think.strip()
    answer = answer.strip()
    if not think:
        raise EmptyField("think")
    if not answer:
        raise EmptyField("answer")
    parts = [f"<think>{think}</think>"]
    if keys is not None:
        folded = sorted({k.strip().casefold() for k in keys if k.strip()})
        rendered = ", ".join(f'"{k}"' for k in folded)
        parts.append(f"<visual_keys>[{rendered}]</visual_keys>")
    parts.append(f"<answer>{answer}</answer>")
    return "\n".join(parts)
