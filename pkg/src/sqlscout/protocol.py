"""Tag grammar: detect `[RUN] ... [EXECUTE]` invocations in generated text.

The tags are literal ASCII strings and form the wire contract between the
model and the runtime. `[EXECUTE]` alone closes an invocation; the `[RUN]`
opener is optional garnish: when it is missing, the invocation starts at the
nearest tool name before the closing tag. Payloads (SQL bodies, column
lists) must not themselves contain the tag strings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .model import Tool, ToolCall

RUN_TAG = "[RUN]"
EXECUTE_TAG = "[EXECUTE]"

_TOOL_NAMES = {t.value: t for t in Tool}
_TOOL_NAME_RE = re.compile(
    "|".join(re.escape(name) for name in sorted(_TOOL_NAMES, key=len, reverse=True)),
    re.IGNORECASE,
)
_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)
_STATEMENT_RE = re.compile(r"^[ \t]*(?:SELECT|WITH)\b", re.IGNORECASE | re.MULTILINE)


@dataclass(frozen=True)
class TextChunk:
    text: str


@dataclass(frozen=True)
class Invocation:
    """A complete invocation span within the scanned text.

    ``start``/``end`` cover the region consumed by this invocation, ending
    just past the closing [EXECUTE] tag; ``raw`` is the text between the
    tags, ready for parse_invocation.
    """

    start: int
    end: int
    raw: str


ScanEvent = TextChunk | Invocation


@dataclass(frozen=True)
class Malformed:
    """An invocation that could not be parsed; reason is model-readable."""

    reason: str
    raw: str


ParseOutcome = ToolCall | Malformed


def scan_events(text: str):
    """Yield TextChunk / Invocation events over the full text, in order.

    Invocation spans are non-overlapping: scanning resumes after each
    closing tag.
    """
    pos = 0
    while True:
        exec_idx = text.find(EXECUTE_TAG, pos)
        if exec_idx < 0:
            if pos < len(text):
                yield TextChunk(text[pos:])
            return
        region = text[pos:exec_idx]
        run_idx = region.rfind(RUN_TAG)
        if run_idx >= 0:
            span_start = pos + run_idx
            raw = region[run_idx + len(RUN_TAG) :].strip()
        else:
            match = None
            for match in _TOOL_NAME_RE.finditer(region):
                pass  # keep the nearest (last) tool-name match before the tag
            if match is not None:
                span_start = pos + match.start()
                raw = region[match.start() :].strip()
            else:
                span_start = exec_idx
                raw = ""
        if span_start > pos:
            yield TextChunk(text[pos:span_start])
        span_end = exec_idx + len(EXECUTE_TAG)
        yield Invocation(start=span_start, end=span_end, raw=raw)
        pos = span_end


def scan_stream(accumulated_text: str) -> Invocation | None:
    """First complete invocation in the text so far, or None.

    Prefix-monotone: once a span is returned for some text, every extension
    of that text returns the same span.
    """
    for event in scan_events(accumulated_text):
        if isinstance(event, Invocation):
            return event
    return None


def _strip_wrapping(s: str) -> str:
    """Strip surrounding quotes, backticks, and code fences from an argument."""
    for _ in range(5):
        s = s.strip()
        if len(s) >= 6 and s.startswith("```") and s.endswith("```"):
            inner = s[3:-3]
            first_line, _, rest = inner.partition("\n")
            # a language label on the opening fence is dropped
            if rest and re.fullmatch(r"[A-Za-z0-9_+-]*[ \t]*", first_line):
                inner = rest
            s = inner
            continue
        if len(s) >= 2 and s[0] == s[-1] and s[0] in ("'", '"', "`"):
            s = s[1:-1]
            continue
        return s.strip()
    return s.strip()


def _split_list_items(body: str) -> list[str]:
    """Split a bracketed, comma-separated, optionally quoted item list."""
    body = body.strip()
    if body.startswith("[") and body.endswith("]"):
        body = body[1:-1]
    items: list[str] = []
    current: list[str] = []
    quote: str | None = None
    for ch in body:
        if quote:
            if ch == quote:
                quote = None
            else:
                current.append(ch)
            continue
        if ch in ("'", '"', "`"):
            quote = ch
            continue
        if ch == ",":
            item = "".join(current).strip()
            if item:
                items.append(item)
            current = []
            continue
        current.append(ch)
    item = "".join(current).strip()
    if item:
        items.append(item)
    return items


def parse_invocation(raw: str) -> ParseOutcome:
    """Parse the text inside an invocation span into a ToolCall.

    The tool name is matched case-insensitively against the four tools. The
    run_query argument is everything between the first "(" after the tool
    name and the LAST ")". SQL freely contains parentheses and quotes, so a
    grammar-true parser would reject valid output. Surrounding tags are
    tolerated so the canonical rendered form parses back unchanged.
    """
    if not isinstance(raw, str):
        return Malformed("invocation is not text", repr(raw))
    text = raw.strip()
    if text.startswith(RUN_TAG):
        text = text[len(RUN_TAG) :].strip()
    if text.endswith(EXECUTE_TAG):
        text = text[: -len(EXECUTE_TAG)].strip()
    if not text:
        return Malformed("empty invocation", raw)

    name_match = re.match(r"([A-Za-z_][A-Za-z0-9_]*)", text)
    if not name_match:
        return Malformed("no tool name found", raw)
    tool = _TOOL_NAMES.get(name_match.group(1).lower())
    if tool is None:
        return Malformed(f"unknown tool {name_match.group(1)}", raw)

    open_idx = text.find("(", name_match.end())
    if open_idx < 0:
        body = ""
    else:
        close_idx = text.rfind(")")
        body = text[open_idx + 1 : close_idx] if close_idx > open_idx else text[open_idx + 1 :]

    if tool is Tool.READ_TABLE_NAMES:
        return ToolCall(tool)
    if tool is Tool.READ_TABLE_COLUMNS:
        arg = _strip_wrapping(body)
        if not arg:
            return Malformed("missing table name", raw)
        return ToolCall(tool, (arg,))
    if tool is Tool.READ_COLUMNS_DOCUMENTATION:
        return ToolCall(tool, (tuple(_split_list_items(body)),))
    sql = _strip_wrapping(body)
    if not sql:
        return Malformed("empty query", raw)
    return ToolCall(tool, (sql,))


def format_call(call: ToolCall) -> str:
    """Plain textual form of a call, without tags: name(args)."""
    if call.tool is Tool.READ_TABLE_NAMES:
        return "read_table_names()"
    if call.tool is Tool.READ_TABLE_COLUMNS:
        return f'read_table_columns("{call.args[0]}")'
    if call.tool is Tool.READ_COLUMNS_DOCUMENTATION:
        inner = ", ".join(f'"{name}"' for name in call.args[0])
        return f"read_columns_documentation([{inner}])"
    return f"run_query({call.args[0]})"


def render_invocation(call: ToolCall) -> str:
    """Canonical wire form: [RUN] name(args) [EXECUTE]."""
    return f"{RUN_TAG} {format_call(call)} {EXECUTE_TAG}"


def extract_final_sql(transcript: str) -> str | None:
    """Pull the final SQL answer out of a generation reply.

    Preference order: the last fenced code block labeled sql, then the last
    fenced block of any label, then the last statement starting with
    SELECT/WITH (cut at the first semicolon).
    """
    fences = list(_FENCE_RE.finditer(transcript))
    sql_fences = [m for m in fences if m.group(1).strip().lower() == "sql"]
    chosen = sql_fences[-1] if sql_fences else (fences[-1] if fences else None)
    if chosen is not None:
        body = chosen.group(2).strip()
        return body or None

    last = None
    for last in _STATEMENT_RE.finditer(transcript):
        pass
    if last is None:
        return None
    tail = transcript[last.start() :]
    semi = tail.find(";")
    if semi >= 0:
        tail = tail[:semi]
    tail = tail.strip()
    return tail or None
