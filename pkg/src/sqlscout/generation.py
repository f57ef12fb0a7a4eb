"""Phase two: final SQL generation from stored exploration traces.

The agent's own inline answer is discarded; only the executed commands and
their results are plugged into a fresh prompt. Truncating that list at depth
k is the test-time-compute knob, refinement retries failed candidates with
error feedback, and fanning the same prompt across several backends buys
answer diversity.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace

from .backend import Backend, CompletionRequest, FINISH_ERROR
from .catalog import DbCatalog, probe_execution
from .model import ExecOutcome, ExplorationTrace, OperationRecord, Question, SqlCandidate
from .protocol import extract_final_sql, format_call
from .sqltext import locate_select_list
from .agent import load_prompt_template

logger = logging.getLogger(__name__)

MAX_REFINE_RETRIES = 5
EMPTY_RESULT_NOTE = "query returned zero rows"

GENERATION_MAX_TOKENS = 2048


@dataclass(frozen=True)
class GenerationPrompt:
    """Inputs to one final-generation completion."""

    question: Question
    operations_included: tuple[OperationRecord, ...]
    refinement_feedback: tuple[tuple[str, str], ...] = ()  # (attempt_sql, note)

    def __post_init__(self):
        if len(self.refinement_feedback) > MAX_REFINE_RETRIES:
            raise ValueError(f"at most {MAX_REFINE_RETRIES} feedback entries")


@dataclass(frozen=True)
class RefinementOutcome:
    final: SqlCandidate
    attempts: int
    succeeded: bool


def build_generation_prompt(question: Question, trace: ExplorationTrace, k: int) -> GenerationPrompt:
    """Prompt over the first min(k, n) operations of the trace, in order."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return GenerationPrompt(question=question, operations_included=trace.operations[:k])


def _render_operations(ops: tuple[OperationRecord, ...]) -> str:
    if not ops:
        return "(no exploration commands were executed)"
    blocks = []
    for op in ops:
        result = op.rendered_result if op.error is None else f"error: {op.error}"
        blocks.append(f"Command {op.index + 1}: {format_call(op.call)}\nResult:\n{result}")
    return "\n\n".join(blocks)


def _render_feedback(feedback: tuple[tuple[str, str], ...]) -> str:
    if not feedback:
        return ""
    lines = ["", "Previous attempts that must not be repeated:"]
    for i, (sql, note) in enumerate(feedback, start=1):
        lines.append(f"{i}. {sql}\n   -> {note}")
    lines.append("")
    return "\n".join(lines)


def render_generation_prompt(prompt: GenerationPrompt, prompts_dir=None) -> str:
    template = load_prompt_template("final_generation.txt", prompts_dir)
    return template.format(
        question=prompt.question.text,
        evidence=prompt.question.evidence or "(none)",
        operations=_render_operations(prompt.operations_included),
        feedback=_render_feedback(prompt.refinement_feedback),
    )


def generate_sql(
    prompt: GenerationPrompt,
    backend: Backend,
    catalog: DbCatalog,
    round: int = 1,
    timeout_s: float = 30.0,
    prompts_dir=None,
) -> SqlCandidate:
    """One completion -> extract the SQL -> execute it for the outcome."""
    text = render_generation_prompt(prompt, prompts_dir)
    chunk = backend.complete(
        CompletionRequest(messages=(("user", text),), max_tokens=GENERATION_MAX_TOKENS)
    )
    if chunk.finish == FINISH_ERROR:
        return SqlCandidate(
            sql="", backend_id=backend.name, round=round,
            exec_outcome=ExecOutcome.error(f"backend error: {chunk.error}"),
        )
    sql = extract_final_sql(chunk.text)
    if sql is None:
        return SqlCandidate(
            sql="", backend_id=backend.name, round=round,
            exec_outcome=ExecOutcome.error("no SQL produced"),
        )
    outcome = probe_execution(catalog, sql, timeout_s=timeout_s)
    return SqlCandidate(sql=sql, backend_id=backend.name, round=round, exec_outcome=outcome)


def refine_sql(
    prompt: GenerationPrompt,
    backend: Backend,
    catalog: DbCatalog,
    round: int = 1,
    max_retries: int = MAX_REFINE_RETRIES,
    timeout_s: float = 30.0,
    prompts_dir=None,
) -> RefinementOutcome:
    """Regenerate until the SQL executes with at least one row, bounded retries.

    Each retry appends the prior attempt and its error (or an empty-result
    note) to the prompt feedback. The final candidate is the last attempt
    regardless of success.
    """
    feedback = list(prompt.refinement_feedback)
    attempts = 0
    while True:
        attempts += 1
        current = replace(prompt, refinement_feedback=tuple(feedback))
        candidate = generate_sql(
            current, backend, catalog, round=round, timeout_s=timeout_s, prompts_dir=prompts_dir
        )
        if candidate.exec_outcome.kind == "ok":
            return RefinementOutcome(final=candidate, attempts=attempts, succeeded=True)
        if attempts > max_retries:
            return RefinementOutcome(final=candidate, attempts=attempts, succeeded=False)
        if candidate.exec_outcome.kind == "error":
            note = candidate.exec_outcome.message
        else:
            note = EMPTY_RESULT_NOTE
        feedback.append((candidate.sql, note))


def fan_out_candidates(
    question: Question,
    trace: ExplorationTrace,
    k: int,
    backends: list[Backend],
    rounds: int,
    catalog: DbCatalog,
    postprocess_backends: tuple[str, ...] = (),
    timeout_s: float = 30.0,
    prompts_dir=None,
) -> list[SqlCandidate]:
    """Per round, every backend refines one candidate from the same prompt.

    Backends named in ``postprocess_backends`` additionally yield a
    column-rewritten variant. A backend failing an entire round leaves a
    placeholder error candidate so the bookkeeping stays rectangular.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not backends:
        raise ValueError("at least one backend required")
    base = build_generation_prompt(question, trace, k)
    out: list[SqlCandidate] = []
    for rnd in range(1, rounds + 1):
        for backend in backends:
            try:
                outcome = refine_sql(
                    base, backend, catalog, round=rnd, timeout_s=timeout_s, prompts_dir=prompts_dir
                )
                candidate = outcome.final
            except Exception as exc:  # bookkeeping placeholder, never counted correct
                logger.warning("backend %s failed round %d: %s", backend.name, rnd, exc)
                candidate = SqlCandidate(
                    sql="", backend_id=backend.name, round=rnd,
                    exec_outcome=ExecOutcome.error(f"round failed: {exc}"),
                )
            out.append(candidate)
            if backend.name in postprocess_backends:
                out.append(
                    postprocess_columns(
                        candidate, base, backend, catalog,
                        timeout_s=timeout_s, prompts_dir=prompts_dir,
                    )
                )
    return out


def _parse_column_reply(reply: str) -> list[str] | None:
    """Extract a column list from the post-processing model's reply."""
    text = reply.strip()
    fence = re.search(r"```[^\n`]*\n(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1).strip()
    # JSON array is the documented format
    start, end = text.find("["), text.rfind("]")
    if start >= 0 and end > start:
        try:
            data = json.loads(text[start : end + 1])
            if isinstance(data, list) and data and all(isinstance(c, str) for c in data):
                cols = [c.strip() for c in data if c.strip()]
                return cols or None
        except json.JSONDecodeError:
            pass
    # fall back to one line of comma-separated column expressions; reject
    # anything that looks like prose (spaces outside a call's parentheses)
    line = text.splitlines()[0].strip() if text else ""
    if line:
        cols = [c.strip().strip("\"'`") for c in line.split(",")]
        item = re.compile(r"[A-Za-z_*][\w.*]*(?:\s*\([\w.*,' ]*\))?")
        if cols and all(c and item.fullmatch(c) for c in cols):
            return cols
    return None


def postprocess_columns(
    candidate: SqlCandidate,
    prompt: GenerationPrompt,
    backend: Backend,
    catalog: DbCatalog,
    timeout_s: float = 30.0,
    prompts_dir=None,
) -> SqlCandidate:
    """Rewrite only the outermost select-list of a candidate.

    The backend is asked which columns should be selected and in what order;
    everything from the outermost FROM keyword onward stays byte-identical.
    If the SQL or the model reply cannot be handled, the original candidate
    comes back unchanged with a warning.
    """
    if not candidate.sql:
        logger.warning("postprocess skipped: empty candidate sql")
        return candidate
    span = locate_select_list(candidate.sql)
    if span is None:
        logger.warning("postprocess skipped: no outermost select-list found")
        return candidate

    template = load_prompt_template("column_postprocess.txt", prompts_dir)
    request_text = template.format(
        question=prompt.question.text,
        evidence=prompt.question.evidence or "(none)",
        candidate_sql=candidate.sql,
    )
    chunk = backend.complete(
        CompletionRequest(messages=(("user", request_text),), max_tokens=512)
    )
    if chunk.finish == FINISH_ERROR:
        logger.warning("postprocess skipped: backend error %s", chunk.error)
        return candidate
    columns = _parse_column_reply(chunk.text)
    if not columns:
        logger.warning("postprocess skipped: unparseable column reply")
        return candidate

    start, end = span
    new_sql = candidate.sql[:start] + ", ".join(columns) + " " + candidate.sql[end:]
    outcome = probe_execution(catalog, new_sql, timeout_s=timeout_s)
    return SqlCandidate(
        sql=new_sql,
        backend_id=candidate.backend_id,
        round=candidate.round,
        postprocessed=True,
        exec_outcome=outcome,
    )
