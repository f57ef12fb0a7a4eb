"""Execution-accuracy scoring, Best-of-N rollups, sampling, scaling runner.

Result comparison follows the public benchmark evaluator: row tuples are
compared as sets (duplicates collapse, row order is ignored even for ORDER BY
queries, a known benchmark quirk), while column order within a row is
significant and an extra column makes a candidate wrong. NULL equals NULL
here: this is tuple-level equality, not SQL three-valued logic.
"""

from __future__ import annotations

import logging
import math
import random
import sqlite3
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .backend import Backend
from .catalog import DbCatalog, QueryDeadline, connect_readonly, guard_select_only
from .errors import ExecutionError
from .generation import build_generation_prompt, generate_sql, refine_sql
from .model import (
    AgentKind,
    CellValue,
    Difficulty,
    ExplorationTrace,
    Question,
    canonicalize_value,
)

logger = logging.getLogger(__name__)

ROW_CEILING = 100_000


@dataclass(frozen=True)
class ResultSet:
    rows: tuple[tuple[CellValue, ...], ...]
    column_count: int

    def __post_init__(self):
        for row in self.rows:
            if len(row) != self.column_count:
                raise ValueError("every row must have exactly column_count cells")


@dataclass(frozen=True)
class CandidateFlag:
    backend_id: str
    round: int
    postprocessed: bool
    matched: bool


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    flags: tuple[CandidateFlag, ...]
    first_correct_round: int | None
    stratum: Difficulty

    @classmethod
    def from_flags(
        cls, question_id: str, flags: Sequence[CandidateFlag], stratum: Difficulty
    ) -> "EvalRecord":
        rounds = [f.round for f in flags if f.matched]
        return cls(
            question_id=question_id,
            flags=tuple(flags),
            first_correct_round=min(rounds) if rounds else None,
            stratum=stratum,
        )


@dataclass(frozen=True)
class ScalingPoint:
    k: int
    agent_kind: AgentKind
    refinement_enabled: bool
    execution_accuracy: float

    def __post_init__(self):
        if not (0.0 <= self.execution_accuracy <= 1.0):
            raise ValueError("execution_accuracy must be within [0, 1]")


def execute_for_eval(
    sql: str,
    catalog: DbCatalog,
    timeout_s: float = 30.0,
    row_ceiling: int = ROW_CEILING,
) -> ResultSet:
    """Materialize the full result with canonicalized cells.

    No row cap is applied for metric fidelity, but a hard safety ceiling
    turns pathological results into errors. Raises ExecutionError on SQL
    errors, timeout, or the ceiling; callers score those as incorrect.
    """
    if guard_select_only(sql) is None:
        raise ExecutionError("statement rejected: not a single SELECT")
    deadline = QueryDeadline(timeout_s)
    try:
        conn = connect_readonly(catalog.db_path, timeout_s=timeout_s)
    except sqlite3.Error as exc:
        raise ExecutionError(str(exc)) from exc
    try:
        conn.set_progress_handler(deadline, 1000)
        try:
            cursor = conn.execute(sql)
            fetched = []
            while True:
                batch = cursor.fetchmany(1000)
                if not batch:
                    break
                fetched.extend(batch)
                if len(fetched) > row_ceiling:
                    raise ExecutionError(f"row ceiling exceeded ({row_ceiling})")
            column_count = len(cursor.description) if cursor.description else 0
        except sqlite3.Error as exc:
            if deadline.expired:
                raise ExecutionError(f"query timed out after {timeout_s:g}s") from exc
            raise ExecutionError(str(exc)) from exc
    finally:
        conn.set_progress_handler(None, 0)
        conn.close()
    rows = tuple(tuple(canonicalize_value(cell) for cell in row) for row in fetched)
    return ResultSet(rows=rows, column_count=column_count)


def execution_match(pred: ResultSet, gold: ResultSet) -> bool:
    """True iff column counts agree and the row-tuple SETS are equal."""
    if pred.column_count != gold.column_count:
        return False
    return set(pred.rows) == set(gold.rows)


def best_of_n(records: Iterable[EvalRecord], n: int) -> float:
    """Fraction of questions solved by some candidate within rounds 1..n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    records = list(records)
    if not records:
        return 0.0
    hits = sum(
        1
        for r in records
        if r.first_correct_round is not None and r.first_correct_round <= n
    )
    return hits / len(records)


def stratified_sample(
    questions: Sequence[Question], fraction: float, seed: int
) -> list[Question]:
    """Seeded stratified sample over difficulty strata.

    Per-stratum counts come from largest-remainder proportional allocation of
    round(fraction * N) slots; sampling within a stratum is uniform without
    replacement. Deterministic for a fixed seed; output preserves input order.
    """
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    if not questions:
        return []

    strata: dict[Difficulty, list[int]] = {}
    for idx, q in enumerate(questions):
        strata.setdefault(q.difficulty, []).append(idx)

    total_target = int(round(fraction * len(questions)))
    quotas = {s: fraction * len(idxs) for s, idxs in strata.items()}
    counts = {s: math.floor(q) for s, q in quotas.items()}
    leftover = total_target - sum(counts.values())
    by_remainder = sorted(
        strata,
        key=lambda s: (-(quotas[s] - counts[s]), -len(strata[s]), s.value),
    )
    for s in by_remainder:
        if leftover <= 0:
            break
        if counts[s] < len(strata[s]):
            counts[s] += 1
            leftover -= 1

    chosen: list[int] = []
    for s, idxs in strata.items():
        rng = random.Random(f"{seed}:{s.value}")
        chosen.extend(rng.sample(idxs, counts[s]))
    return [questions[i] for i in sorted(chosen)]


def candidate_matches(
    sql: str, gold: ResultSet | None, catalog: DbCatalog, timeout_s: float = 30.0
) -> bool:
    """Score one candidate against a pre-executed gold result."""
    if gold is None or not sql:
        return False
    try:
        pred = execute_for_eval(sql, catalog, timeout_s=timeout_s)
    except ExecutionError:
        return False
    return execution_match(pred, gold)


def run_scaling_experiment(
    questions: Sequence[Question],
    catalog_resolver: Callable[[str], DbCatalog],
    agent_cfgs: Mapping[AgentKind, "object"],
    ks: Sequence[int],
    refinement_modes: Sequence[bool],
    backend: Backend,
    trace_provider: Callable[[AgentKind, str], ExplorationTrace | None] | None = None,
    timeout_s: float = 30.0,
    prompts_dir=None,
) -> list[ScalingPoint]:
    """Sweep exploration depth k for each agent kind and refinement mode.

    Traces are computed ONCE per agent kind (or loaded via trace_provider)
    and reused across every k, so the only thing varying between points is
    the operations plugged into the final prompt. Questions whose trace is
    missing leave the denominator; generation failures count as incorrect.
    """
    from .agent import run_agent  # local import: evaluation stays usable without a loop

    traces: dict[tuple[AgentKind, str], ExplorationTrace] = {}
    golds: dict[str, ResultSet | None] = {}
    for kind, cfg in agent_cfgs.items():
        for q in questions:
            trace = trace_provider(kind, q.id) if trace_provider else None
            if trace is None and trace_provider is None:
                trace = run_agent(q, catalog_resolver(q.db_id), cfg)
            if trace is not None:
                traces[(kind, q.id)] = trace

    for q in questions:
        if q.gold_sql:
            try:
                golds[q.id] = execute_for_eval(q.gold_sql, catalog_resolver(q.db_id), timeout_s=timeout_s)
            except ExecutionError as exc:
                logger.warning("gold SQL failed for %s: %s", q.id, exc)
                golds[q.id] = None
        else:
            golds[q.id] = None

    points: list[ScalingPoint] = []
    for kind in agent_cfgs:
        scored_questions = [q for q in questions if (kind, q.id) in traces]
        for k in ks:
            for refine in refinement_modes:
                correct = 0
                for q in scored_questions:
                    prompt_trace = traces[(kind, q.id)]
                    prompt = build_generation_prompt(q, prompt_trace, k)
                    catalog = catalog_resolver(q.db_id)
                    if refine:
                        candidate = refine_sql(
                            prompt, backend, catalog, timeout_s=timeout_s, prompts_dir=prompts_dir
                        ).final
                    else:
                        candidate = generate_sql(
                            prompt, backend, catalog, timeout_s=timeout_s, prompts_dir=prompts_dir
                        )
                    if candidate_matches(candidate.sql, golds.get(q.id), catalog, timeout_s=timeout_s):
                        correct += 1
                accuracy = correct / len(scored_questions) if scored_questions else 0.0
                points.append(
                    ScalingPoint(
                        k=k, agent_kind=kind, refinement_enabled=refine, execution_accuracy=accuracy
                    )
                )
    return points
