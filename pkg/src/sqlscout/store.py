"""Persistent storage for runs: manifests, traces, candidates, reports.

Everything is line-delimited JSON (one self-contained record per line,
``format_version`` stamped) under one directory per run:

    <root>/<run_id>/manifest.json
    <root>/<run_id>/traces/<agent_kind>/<question_id>.jsonl     (one record)
    <root>/<run_id>/candidates/k<k>/<question_id>.jsonl          (one per candidate)
    <root>/<run_id>/eval/report.jsonl, summary.json
    <root>/<run_id>/scaling.csv

Writes are atomic per record file (temp file + rename); records carry no
timestamps so a run re-executed from its manifest with scripted backends
reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import IngestError, SqlScoutError, TraceExistsError
from .catalog import DbCatalog, attach_database
from .model import (
    AgentKind,
    ExecOutcome,
    ExplorationTrace,
    OperationRecord,
    Question,
    SqlCandidate,
    Termination,
    Tool,
    ToolCall,
    parse_question_record,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_QUESTIONS_FILE_CANDIDATES = ("dev.json", "questions.json", "dev_questions.json", "mini_dev.json")
_DATABASES_DIR_CANDIDATES = ("dev_databases", "databases")


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def _atomic_write(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def safe_name(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", str(value)) or "_"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# ── Record serialization ─────────────────────────────────────────────────────


def call_to_record(call: ToolCall) -> dict:
    args = [list(a) if isinstance(a, tuple) else a for a in call.args]
    return {"tool": call.tool.value, "args": args}


def call_from_record(rec: dict) -> ToolCall:
    args = tuple(tuple(a) if isinstance(a, list) else a for a in rec["args"])
    return ToolCall(Tool(rec["tool"]), args)


def trace_to_record(trace: ExplorationTrace) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "question_id": trace.question_id,
        "agent_kind": trace.agent_kind.value,
        "operations": [
            {
                "index": op.index,
                "call": call_to_record(op.call),
                "rendered_result": op.rendered_result,
                "row_count": op.row_count,
                "error": op.error,
                "truncated": op.truncated,
            }
            for op in trace.operations
        ],
        "raw_transcript": trace.raw_transcript,
        "tokens_generated": trace.tokens_generated,
        "termination": trace.termination.value,
    }


def trace_from_record(rec: dict) -> ExplorationTrace:
    return ExplorationTrace(
        question_id=rec["question_id"],
        agent_kind=AgentKind(rec["agent_kind"]),
        operations=tuple(
            OperationRecord(
                index=op["index"],
                call=call_from_record(op["call"]),
                rendered_result=op["rendered_result"],
                row_count=op["row_count"],
                error=op["error"],
                truncated=op["truncated"],
            )
            for op in rec["operations"]
        ),
        raw_transcript=rec["raw_transcript"],
        tokens_generated=rec["tokens_generated"],
        termination=Termination(rec["termination"]),
    )


def candidate_to_record(question_id: str, candidate: SqlCandidate) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "question_id": question_id,
        "sql": candidate.sql,
        "backend_id": candidate.backend_id,
        "round": candidate.round,
        "postprocessed": candidate.postprocessed,
        "exec_outcome": {
            "kind": candidate.exec_outcome.kind,
            "row_count": candidate.exec_outcome.row_count,
            "message": candidate.exec_outcome.message,
        },
    }


def candidate_from_record(rec: dict) -> tuple[str, SqlCandidate]:
    eo = rec["exec_outcome"]
    return rec["question_id"], SqlCandidate(
        sql=rec["sql"],
        backend_id=rec["backend_id"],
        round=rec["round"],
        postprocessed=rec["postprocessed"],
        exec_outcome=ExecOutcome(kind=eo["kind"], row_count=eo["row_count"], message=eo["message"]),
    )


# ── Run manifest ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RunManifest:
    """Snapshot of everything needed to re-execute a run deterministically."""

    run_id: str
    config: dict
    dataset: dict  # {"question_counts": {stratum: n}, "databases": {db_id: digest}}
    created_at: str

    @classmethod
    def create(cls, run_id: str, config: dict, dataset: "Dataset | None" = None) -> "RunManifest":
        fingerprint: dict = {"question_counts": {}, "databases": {}}
        if dataset is not None:
            counts: dict[str, int] = {}
            for q in dataset.questions:
                counts[q.difficulty.value] = counts.get(q.difficulty.value, 0) + 1
            fingerprint["question_counts"] = dict(sorted(counts.items()))
            fingerprint["databases"] = {
                db_id: file_sha256(path) for db_id, path in sorted(dataset.db_paths.items())
            }
        return cls(
            run_id=run_id,
            config=config,
            dataset=fingerprint,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def to_record(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "run_id": self.run_id,
            "config": self.config,
            "dataset": self.dataset,
            "created_at": self.created_at,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RunManifest":
        return cls(
            run_id=rec["run_id"],
            config=rec["config"],
            dataset=rec["dataset"],
            created_at=rec["created_at"],
        )


# ── Trace store ──────────────────────────────────────────────────────────────


class TraceStore:
    """Filesystem store for runs; see the module docstring for layout."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / safe_name(run_id)

    # manifests -----------------------------------------------------------

    def write_manifest(self, manifest: RunManifest) -> Path:
        path = self.run_dir(manifest.run_id) / "manifest.json"
        _atomic_write(path, json.dumps(manifest.to_record(), indent=2, sort_keys=True) + "\n")
        return path

    def read_manifest(self, run_id: str) -> RunManifest:
        path = self.run_dir(run_id) / "manifest.json"
        return RunManifest.from_record(json.loads(path.read_text(encoding="utf-8")))

    # traces ---------------------------------------------------------------

    def trace_path(self, run_id: str, agent_kind: AgentKind, question_id: str) -> Path:
        return (
            self.run_dir(run_id)
            / "traces"
            / agent_kind.value
            / f"{safe_name(question_id)}.jsonl"
        )

    def has_trace(self, run_id: str, agent_kind: AgentKind, question_id: str) -> bool:
        return self.trace_path(run_id, agent_kind, question_id).exists()

    def write_trace(
        self, run_id: str, trace: ExplorationTrace, force: bool = False
    ) -> Path:
        if not (self.run_dir(run_id) / "manifest.json").exists():
            raise SqlScoutError(f"run {run_id!r} has no manifest; write one first")
        path = self.trace_path(run_id, trace.agent_kind, trace.question_id)
        if path.exists() and not force:
            raise TraceExistsError(
                f"trace already stored for ({run_id}, {trace.question_id}, "
                f"{trace.agent_kind.value}); use force to rewrite"
            )
        _atomic_write(path, _json_line(trace_to_record(trace)))
        return path

    def read_trace(self, run_id: str, agent_kind: AgentKind, question_id: str) -> ExplorationTrace:
        path = self.trace_path(run_id, agent_kind, question_id)
        return trace_from_record(json.loads(path.read_text(encoding="utf-8")))

    def iter_traces(self, run_id: str, agent_kind: AgentKind):
        base = self.run_dir(run_id) / "traces" / agent_kind.value
        if not base.is_dir():
            return
        for path in sorted(base.glob("*.jsonl")):
            yield trace_from_record(json.loads(path.read_text(encoding="utf-8")))

    # candidates -----------------------------------------------------------

    def candidates_path(self, run_id: str, k: int, question_id: str) -> Path:
        return self.run_dir(run_id) / "candidates" / f"k{k}" / f"{safe_name(question_id)}.jsonl"

    def write_candidates(
        self,
        run_id: str,
        k: int,
        question_id: str,
        candidates: list[SqlCandidate],
        force: bool = False,
    ) -> Path:
        path = self.candidates_path(run_id, k, question_id)
        if path.exists() and not force:
            raise TraceExistsError(
                f"candidates already stored for ({run_id}, {question_id}, k={k})"
            )
        lines = "".join(_json_line(candidate_to_record(question_id, c)) for c in candidates)
        _atomic_write(path, lines)
        return path

    def read_candidates(self, run_id: str, k: int) -> dict[str, list[SqlCandidate]]:
        base = self.run_dir(run_id) / "candidates" / f"k{k}"
        out: dict[str, list[SqlCandidate]] = {}
        if not base.is_dir():
            return out
        for path in sorted(base.glob("*.jsonl")):
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                qid, candidate = candidate_from_record(json.loads(line))
                out.setdefault(qid, []).append(candidate)
        return out

    def candidate_ks(self, run_id: str) -> list[int]:
        base = self.run_dir(run_id) / "candidates"
        if not base.is_dir():
            return []
        ks = []
        for d in base.iterdir():
            if d.is_dir() and d.name.startswith("k") and d.name[1:].isdigit():
                ks.append(int(d.name[1:]))
        return sorted(ks)

    # reports ---------------------------------------------------------------

    def write_report(self, run_id: str, record_lines: list[dict], summary: dict) -> tuple[Path, Path]:
        report_path = self.run_dir(run_id) / "eval" / "report.jsonl"
        summary_path = self.run_dir(run_id) / "eval" / "summary.json"
        _atomic_write(report_path, "".join(_json_line(r) for r in record_lines))
        _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return report_path, summary_path


# ── Benchmark ingestion ──────────────────────────────────────────────────────


@dataclass
class Dataset:
    """A resolved benchmark layout: questions plus database locations."""

    root: Path
    questions: tuple[Question, ...]
    db_paths: dict[str, Path]
    doc_dirs: dict[str, Path | None]
    warnings: tuple[str, ...] = ()

    def catalog(self, db_id: str) -> DbCatalog:
        if db_id not in self.db_paths:
            raise IngestError(f"unknown db_id {db_id!r}; known: {sorted(self.db_paths)}")
        return attach_database(self.db_paths[db_id], self.doc_dirs.get(db_id))

    def question_by_id(self, question_id: str) -> Question | None:
        for q in self.questions:
            if q.id == question_id:
                return q
        return None


def ingest_bird_layout(root: str | Path) -> Dataset:
    """Load a benchmark tree: a questions JSON array plus per-db directories.

    Expects ``<root>/dev_databases/<db_id>/<db_id>.sqlite`` with an optional
    sibling ``database_description/`` directory of per-table CSV files.
    Missing description directories are tolerated.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")

    found = sorted(p.name for p in root.iterdir())
    questions_file = None
    for name in _QUESTIONS_FILE_CANDIDATES:
        if (root / name).is_file():
            questions_file = root / name
            break
    if questions_file is None:
        json_files = sorted(root.glob("*.json"))
        if len(json_files) == 1:
            questions_file = json_files[0]
    if questions_file is None:
        raise IngestError(
            f"no questions file in {root} (looked for {', '.join(_QUESTIONS_FILE_CANDIDATES)}); "
            f"found: {', '.join(found) or '(empty)'}"
        )

    databases_dir = None
    for name in _DATABASES_DIR_CANDIDATES:
        if (root / name).is_dir():
            databases_dir = root / name
            break
    if databases_dir is None:
        raise IngestError(
            f"no databases directory in {root} (looked for "
            f"{', '.join(_DATABASES_DIR_CANDIDATES)}); found: {', '.join(found) or '(empty)'}"
        )

    raw = json.loads(questions_file.read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise IngestError(f"questions file {questions_file.name} is not a JSON array")
    questions = tuple(parse_question_record(rec) for rec in raw)

    warnings: list[str] = []
    db_paths: dict[str, Path] = {}
    doc_dirs: dict[str, Path | None] = {}
    for db_dir in sorted(p for p in databases_dir.iterdir() if p.is_dir()):
        db_id = db_dir.name
        db_file = db_dir / f"{db_id}.sqlite"
        if not db_file.is_file():
            warnings.append(f"database directory without {db_id}.sqlite skipped: {db_dir.name}")
            continue
        db_paths[db_id] = db_file
        desc = db_dir / "database_description"
        doc_dirs[db_id] = desc if desc.is_dir() else None
        if not desc.is_dir():
            warnings.append(f"no database_description for {db_id}")

    missing = sorted({q.db_id for q in questions} - set(db_paths))
    if missing:
        warnings.append(f"questions reference missing databases: {', '.join(missing)}")
    for w in warnings:
        logger.warning("%s", w)
    return Dataset(
        root=root,
        questions=questions,
        db_paths=db_paths,
        doc_dirs=doc_dirs,
        warnings=tuple(warnings),
    )
