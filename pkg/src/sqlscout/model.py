"""Domain types shared by every stage of the pipeline, plus cell canonicalization.

All types here are immutable value objects: safe to share between workers and
to use as dict keys / set members.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .errors import MalformedRecordError

REAL_DECIMALS = 6


class Difficulty(str, Enum):
    SIMPLE = "simple"
    MODERATE = "moderate"
    CHALLENGING = "challenging"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: Any) -> "Difficulty":
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            return cls.UNKNOWN


class AgentKind(str, Enum):
    INTERACTION = "interaction"
    STATIC = "static"


class Termination(str, Enum):
    NATURAL = "natural"
    FORCED_BUDGET = "forced_budget"
    BACKEND_ERROR = "backend_error"


class Tool(str, Enum):
    READ_TABLE_NAMES = "read_table_names"
    READ_TABLE_COLUMNS = "read_table_columns"
    READ_COLUMNS_DOCUMENTATION = "read_columns_documentation"
    RUN_QUERY = "run_query"


# Argument count per tool; read_columns_documentation takes one list argument.
TOOL_ARITY = {
    Tool.READ_TABLE_NAMES: 0,
    Tool.READ_TABLE_COLUMNS: 1,
    Tool.READ_COLUMNS_DOCUMENTATION: 1,
    Tool.RUN_QUERY: 1,
}

# Tools available to the static (no query execution) agent.
STATIC_TOOLS = (
    Tool.READ_TABLE_NAMES,
    Tool.READ_TABLE_COLUMNS,
    Tool.READ_COLUMNS_DOCUMENTATION,
)


@dataclass(frozen=True)
class Question:
    id: str
    db_id: str
    text: str
    evidence: str = ""
    gold_sql: str | None = None
    difficulty: Difficulty = Difficulty.UNKNOWN


def parse_question_record(raw: Mapping[str, Any]) -> Question:
    """Build a Question from one benchmark record.

    ``question`` and ``db_id`` are required; everything else defaults
    (missing difficulty maps to unknown, missing evidence to empty). A record
    without an explicit id gets a stable one derived from its content.
    """
    text = raw.get("question")
    if text is None or str(text).strip() == "":
        raise MalformedRecordError("question")
    db_id = raw.get("db_id")
    if db_id is None or str(db_id).strip() == "":
        raise MalformedRecordError("db_id")

    qid = raw.get("question_id", raw.get("id"))
    if qid is None:
        digest = hashlib.sha1(f"{db_id}\x00{text}".encode("utf-8")).hexdigest()
        qid = f"q-{digest[:10]}"

    gold = raw.get("SQL", raw.get("sql", raw.get("gold_sql")))
    if gold is not None:
        gold = str(gold)

    return Question(
        id=str(qid),
        db_id=str(db_id),
        text=str(text),
        evidence=str(raw.get("evidence", "") or ""),
        gold_sql=gold,
        difficulty=Difficulty.parse(raw.get("difficulty", Difficulty.UNKNOWN)),
    )


@dataclass(frozen=True)
class ToolCall:
    """A parsed tool invocation: tool name plus its positional arguments.

    ``args`` holds strings, except read_columns_documentation whose single
    argument is a tuple of qualified column names.
    """

    tool: Tool
    args: tuple = ()

    def __post_init__(self):
        arity = TOOL_ARITY[self.tool]
        if len(self.args) != arity:
            raise ValueError(f"{self.tool.value} takes {arity} argument(s), got {len(self.args)}")
        if self.tool is Tool.RUN_QUERY:
            sql = self.args[0]
            if not isinstance(sql, str) or not sql.strip():
                raise ValueError("run_query argument must be a non-empty string")
        if self.tool is Tool.READ_COLUMNS_DOCUMENTATION:
            names = self.args[0]
            if not isinstance(names, tuple):
                object.__setattr__(self, "args", (tuple(names),))


@dataclass(frozen=True)
class OperationRecord:
    """One executed tool invocation plus the result rendered to the model."""

    index: int
    call: ToolCall
    rendered_result: str
    row_count: int | None = None
    error: str | None = None
    truncated: bool = False

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("operation index must be >= 0")

    @property
    def succeeded(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class ExplorationTrace:
    """Ordered operation records for one question/agent run."""

    question_id: str
    agent_kind: AgentKind
    operations: tuple[OperationRecord, ...]
    raw_transcript: str
    tokens_generated: int
    termination: Termination

    def __post_init__(self):
        object.__setattr__(self, "operations", tuple(self.operations))
        for i, op in enumerate(self.operations):
            if op.index != i:
                raise ValueError(f"operation indices must be 0..n-1, got {op.index} at position {i}")
        if self.agent_kind is AgentKind.STATIC:
            for op in self.operations:
                if op.call.tool is Tool.RUN_QUERY:
                    raise ValueError("static agent traces cannot contain run_query operations")


@dataclass(frozen=True)
class ExecOutcome:
    """Execution result of a candidate: ok (>=1 row), empty (0 rows), or error."""

    kind: str  # "ok" | "empty" | "error"
    row_count: int = 0
    message: str = ""

    @classmethod
    def ok(cls, row_count: int) -> "ExecOutcome":
        return cls("ok", row_count=row_count)

    @classmethod
    def empty(cls) -> "ExecOutcome":
        return cls("empty")

    @classmethod
    def error(cls, message: str) -> "ExecOutcome":
        return cls("error", message=message)


@dataclass(frozen=True)
class SqlCandidate:
    """A candidate SQL string with provenance and execution outcome."""

    sql: str
    backend_id: str
    round: int = 1
    postprocessed: bool = False
    exec_outcome: ExecOutcome = field(default_factory=ExecOutcome.empty)

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round must be >= 1")


_NUMERIC_KINDS = frozenset({"integer", "real"})


@dataclass(frozen=True, eq=False)
class CellValue:
    """Canonical database cell: null, integer, real, text, or blob digest.

    Numeric kinds compare by value across kinds (integer 2 equals real 2.0),
    matching the reference evaluator's set comparison over raw row tuples.
    """

    kind: str  # "null" | "integer" | "real" | "text" | "blob"
    value: Any = None

    def __eq__(self, other):
        if not isinstance(other, CellValue):
            return NotImplemented
        if self.kind in _NUMERIC_KINDS and other.kind in _NUMERIC_KINDS:
            return self.value == other.value
        return self.kind == other.kind and self.value == other.value

    def __hash__(self):
        if self.kind in _NUMERIC_KINDS:
            # hash(2) == hash(2.0), so mixed-kind equal cells hash alike
            return hash(("num", self.value))
        return hash((self.kind, self.value))


_NULL = CellValue("null")


def canonicalize_value(v: Any) -> CellValue:
    """Canonicalize one raw database cell. Total and idempotent.

    Reals are rounded half-even to six decimal places so execution equality
    is stable across engine float formatting; NaN maps to null (SQLite stores
    NaN as NULL); blobs are represented by a content digest, never raw bytes.
    """
    if isinstance(v, CellValue):
        if v.kind == "real":
            return CellValue("real", round(float(v.value), REAL_DECIMALS))
        return v
    if v is None:
        return _NULL
    if isinstance(v, bool):
        return CellValue("integer", int(v))
    if isinstance(v, int):
        return CellValue("integer", v)
    if isinstance(v, float):
        if math.isnan(v):
            return _NULL
        return CellValue("real", round(v, REAL_DECIMALS))
    if isinstance(v, (bytes, bytearray, memoryview)):
        digest = hashlib.sha256(bytes(v)).hexdigest()
        return CellValue("blob", f"sha256:{digest}")
    if isinstance(v, str):
        return CellValue("text", v)
    return CellValue("text", str(v))
