"""Database attachment, schema/documentation catalog, and the four agent tools.

Databases are single-file SQLite databases opened strictly read-only. Every
tool renders its outcome as text for re-insertion into the model's context;
tool failures are soft: they come back as rendered results, never exceptions,
so the agent loop can show the model its own mistake.
"""

from __future__ import annotations

import csv
import io
import logging
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import AttachError
from .model import ExecOutcome, canonicalize_value
from .sqltext import first_keyword, single_statement_body

logger = logging.getLogger(__name__)

SQLITE_MAGIC = b"SQLite format 3\x00"

READONLY_REJECTION = "read-only: statement rejected"
NO_TABLES = "(no tables)"
NO_COLUMNS_REQUESTED = "(no columns requested)"


@dataclass(frozen=True)
class ExecLimits:
    """Bounds applied to run_query results shown to the model."""

    row_cap: int = 20
    cell_width: int = 80
    timeout_s: float = 30.0


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    declared_type: str
    is_primary_key: bool = False
    fk_target: str | None = None  # "table.column"


@dataclass(frozen=True)
class DocEntry:
    original_column_name: str = ""
    human_column_name: str = ""
    description: str = ""
    data_format: str = ""
    value_description: str = ""


@dataclass(frozen=True)
class RenderedResult:
    """A tool outcome as shown to the model."""

    text: str
    row_count: int = 0
    truncated: bool = False
    error: str | None = None


@dataclass(frozen=True)
class DbCatalog:
    """Immutable schema + documentation snapshot for one attached database.

    Connections are not held here: each tool invocation (and each concurrent
    worker) opens its own read-only connection against ``db_path``.
    """

    db_id: str
    db_path: Path
    tables: tuple[str, ...]
    columns: dict[str, tuple[ColumnInfo, ...]]  # keyed by table name, schema order
    docs: dict[str, DocEntry]  # keyed by "table.column"
    dangling_docs: frozenset[str] = frozenset()
    warnings: tuple[str, ...] = ()

    def resolve_table(self, name: str) -> str | None:
        """Case-insensitive table lookup; returns the declared name."""
        lowered = name.strip().lower()
        for t in self.tables:
            if t.lower() == lowered:
                return t
        return None


def connect_readonly(path: Path, timeout_s: float = 30.0) -> sqlite3.Connection:
    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True, timeout=timeout_s)
    conn.execute("PRAGMA query_only = ON")
    return conn


def attach_database(path: str | Path, docs_path: str | Path | None = None) -> DbCatalog:
    """Open a SQLite file read-only and introspect its schema and docs.

    ``docs_path`` points at a directory of per-table CSV description files;
    malformed rows are skipped with a warning, and an unreadable directory
    leaves the docs empty (attach still succeeds).
    """
    path = Path(path)
    if not path.is_file():
        raise AttachError(f"not a readable file: {path}")
    with open(path, "rb") as fh:
        header = fh.read(len(SQLITE_MAGIC))
    if header != SQLITE_MAGIC:
        raise AttachError(f"not a SQLite format 3 database: {path}")

    try:
        conn = connect_readonly(path)
        try:
            rows = conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' "
                "AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\'"
            ).fetchall()
            tables = tuple(r[0] for r in rows)
            columns: dict[str, tuple[ColumnInfo, ...]] = {}
            for table in tables:
                fk_by_column: dict[str, str] = {}
                for fk in conn.execute(f'PRAGMA foreign_key_list("{table}")'):
                    # (id, seq, ref_table, from_col, to_col, ...)
                    ref_table, from_col, to_col = fk[2], fk[3], fk[4]
                    fk_by_column[from_col] = f"{ref_table}.{to_col or 'rowid'}"
                infos = []
                for cid, name, decl_type, notnull, dflt, pk in conn.execute(
                    f'PRAGMA table_info("{table}")'
                ):
                    infos.append(
                        ColumnInfo(
                            name=name,
                            declared_type=decl_type or "",
                            is_primary_key=bool(pk),
                            fk_target=fk_by_column.get(name),
                        )
                    )
                columns[table] = tuple(infos)
        finally:
            conn.close()
    except sqlite3.Error as exc:
        raise AttachError(f"cannot attach {path}: {exc}") from exc

    warnings: list[str] = []
    docs, dangling = _load_docs(docs_path, tables, columns, warnings) if docs_path else ({}, frozenset())

    return DbCatalog(
        db_id=path.stem,
        db_path=path,
        tables=tables,
        columns=columns,
        docs=docs,
        dangling_docs=dangling,
        warnings=tuple(warnings),
    )


def _load_docs(
    docs_path: str | Path,
    tables: tuple[str, ...],
    columns: dict[str, tuple[ColumnInfo, ...]],
    warnings: list[str],
) -> tuple[dict[str, DocEntry], frozenset[str]]:
    docs_path = Path(docs_path)
    docs: dict[str, DocEntry] = {}
    dangling: set[str] = set()
    if not docs_path.is_dir():
        msg = f"documentation directory not readable: {docs_path}"
        warnings.append(msg)
        logger.warning(msg)
        return docs, frozenset()

    known = {
        (t.lower(), c.name.lower()): (t, c.name) for t in tables for c in columns.get(t, ())
    }
    for csv_file in sorted(docs_path.glob("*.csv")):
        table_stem = csv_file.stem
        # BIRD description files carry mixed encodings; replace invalid bytes.
        text = csv_file.read_bytes().decode("utf-8", errors="replace")
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header:
            warnings.append(f"empty documentation file skipped: {csv_file.name}")
            continue
        idx = {h.strip().lower(): i for i, h in enumerate(header)}

        def cell(row: list[str], key: str) -> str:
            i = idx.get(key)
            if i is None or i >= len(row):
                return ""
            return row[i].strip()

        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            original = cell(row, "original_column_name")
            if not original:
                warnings.append(f"{csv_file.name}:{row_no}: row without original_column_name skipped")
                continue
            entry = DocEntry(
                original_column_name=original,
                human_column_name=cell(row, "column_name"),
                description=cell(row, "column_description"),
                data_format=cell(row, "data_format"),
                value_description=cell(row, "value_description"),
            )
            resolved = known.get((table_stem.lower(), original.lower()))
            if resolved:
                key = f"{resolved[0]}.{resolved[1]}"
            else:
                key = f"{table_stem}.{original}"
                dangling.add(key)
            docs[key] = entry
    if dangling:
        logger.warning("%d documentation keys do not match any table.column", len(dangling))
    return docs, frozenset(dangling)


# ── Tools ────────────────────────────────────────────────────────────────────


def read_table_names(catalog: DbCatalog) -> RenderedResult:
    """One line per table, in schema declaration order. Never truncated."""
    if not catalog.tables:
        return RenderedResult(text=NO_TABLES, row_count=0)
    return RenderedResult(text="\n".join(catalog.tables), row_count=len(catalog.tables))


def read_table_columns(catalog: DbCatalog, table: str) -> RenderedResult:
    """Columns of one table: name, declared type, PK marker, FK target."""
    resolved = catalog.resolve_table(table)
    if resolved is None:
        available = ", ".join(catalog.tables) if catalog.tables else "(none)"
        msg = f"table not found: {table}; available: {available}"
        return RenderedResult(text=msg, row_count=0, error=msg)
    lines = []
    for col in catalog.columns[resolved]:
        parts = [col.name, col.declared_type or "(untyped)"]
        if col.is_primary_key:
            parts.append("[PK]")
        if col.fk_target:
            parts.append(f"[FK -> {col.fk_target}]")
        lines.append(" ".join(parts))
    return RenderedResult(text="\n".join(lines), row_count=len(lines))


def read_columns_documentation(catalog: DbCatalog, names: list[str] | tuple[str, ...]) -> RenderedResult:
    """Documentation lines for qualified column names, in request order."""
    if not names:
        return RenderedResult(text=NO_COLUMNS_REQUESTED, row_count=0)
    lookup = {k.lower(): v for k, v in catalog.docs.items()}
    lines = []
    for name in names:
        entry = lookup.get(str(name).strip().lower())
        if entry is None:
            lines.append(f"{name}: (no documentation)")
            continue
        parts = []
        if entry.description:
            parts.append(entry.description)
        if entry.value_description:
            parts.append(f"values: {entry.value_description}")
        if entry.data_format:
            parts.append(f"format: {entry.data_format}")
        if not parts and entry.human_column_name:
            parts.append(entry.human_column_name)
        body = " | ".join(parts) if parts else "(empty documentation entry)"
        lines.append(f"{name}: {_one_line(body)}")
    return RenderedResult(text="\n".join(lines), row_count=len(names))


def _one_line(text: str) -> str:
    return " ".join(text.split())


def guard_select_only(sql: str) -> str | None:
    """Return the single-statement body if sql is one SELECT/CTE, else None."""
    body = single_statement_body(sql)
    if body is None or not body.strip():
        return None
    if first_keyword(body) not in ("SELECT", "WITH"):
        return None
    return body


class QueryDeadline:
    """Progress-handler hook that aborts a query past a wall-clock deadline."""

    def __init__(self, timeout_s: float):
        self.expires = time.monotonic() + timeout_s
        self.expired = False

    def __call__(self) -> int:
        if time.monotonic() > self.expires:
            self.expired = True
            return 1
        return 0


def _display_cell(raw, width: int) -> str:
    cv = canonicalize_value(raw)
    if cv.kind == "null":
        text = "NULL"
    elif cv.kind == "real":
        text = repr(cv.value)
    else:
        text = str(cv.value)
    text = text.replace("\n", " ").replace("\r", " ")
    if len(text) > width:
        text = text[: max(width - 3, 1)] + "..."
    return text


def run_query(catalog: DbCatalog, sql: str, limits: ExecLimits | None = None) -> RenderedResult:
    """Execute one SELECT on a read-only connection with row cap and timeout.

    Results render as an aligned text table with a header row. If more rows
    exist than the cap, the first cap rows are shown with a footer noting the
    remainder. row_count reports the total number of data rows found.
    """
    limits = limits or ExecLimits()
    if guard_select_only(sql) is None:
        return RenderedResult(text=READONLY_REJECTION, row_count=0, error=READONLY_REJECTION)

    deadline = QueryDeadline(limits.timeout_s)
    try:
        conn = connect_readonly(catalog.db_path, timeout_s=limits.timeout_s)
    except sqlite3.Error as exc:
        msg = f"SQL error: {exc}"
        return RenderedResult(text=msg, row_count=0, error=msg)
    try:
        conn.set_progress_handler(deadline, 1000)
        try:
            cursor = conn.execute(sql)
            shown = cursor.fetchmany(limits.row_cap)
            extra = 0
            while True:
                batch = cursor.fetchmany(1000)
                if not batch:
                    break
                extra += len(batch)
        except sqlite3.Error as exc:
            if deadline.expired:
                msg = f"query timed out after {limits.timeout_s:g}s"
            else:
                msg = f"SQL error: {exc}"
            return RenderedResult(text=msg, row_count=0, error=msg)
        headers = [d[0] for d in cursor.description] if cursor.description else []
    finally:
        conn.set_progress_handler(None, 0)
        conn.close()

    total = len(shown) + extra
    truncated = extra > 0
    if not headers:
        return RenderedResult(text="(no result)", row_count=0)

    header_cells = [_display_cell(h, limits.cell_width) for h in headers]
    data_cells = [[_display_cell(v, limits.cell_width) for v in row] for row in shown]
    widths = [len(h) for h in header_cells]
    for row in data_cells:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def fmt(cells: list[str]) -> str:
        return " | ".join(c.ljust(widths[i]) for i, c in enumerate(cells)).rstrip()

    lines = [fmt(header_cells), "-+-".join("-" * w for w in widths)]
    lines.extend(fmt(row) for row in data_cells)
    if truncated:
        lines.append(f"... ({extra} more rows)")
    elif not data_cells:
        lines.append("(0 rows)")
    return RenderedResult(text="\n".join(lines), row_count=total, truncated=truncated)


def probe_execution(
    catalog: DbCatalog,
    sql: str,
    timeout_s: float = 30.0,
    row_ceiling: int = 100_000,
) -> ExecOutcome:
    """Execute a candidate and classify the outcome: ok / empty / error.

    Used by generation-time refinement: counts rows (up to a ceiling) without
    rendering anything.
    """
    if guard_select_only(sql) is None:
        return ExecOutcome.error(READONLY_REJECTION)
    deadline = QueryDeadline(timeout_s)
    try:
        conn = connect_readonly(catalog.db_path, timeout_s=timeout_s)
    except sqlite3.Error as exc:
        return ExecOutcome.error(str(exc))
    try:
        conn.set_progress_handler(deadline, 1000)
        try:
            cursor = conn.execute(sql)
            count = 0
            while True:
                batch = cursor.fetchmany(1000)
                if not batch:
                    break
                count += len(batch)
                if count > row_ceiling:
                    return ExecOutcome.error(f"row ceiling exceeded ({row_ceiling})")
        except sqlite3.Error as exc:
            if deadline.expired:
                return ExecOutcome.error(f"query timed out after {timeout_s:g}s")
            return ExecOutcome.error(str(exc))
    finally:
        conn.set_progress_handler(None, 0)
        conn.close()
    return ExecOutcome.ok(count) if count else ExecOutcome.empty()
