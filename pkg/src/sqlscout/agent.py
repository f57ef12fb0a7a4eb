"""The exploration agent loop: generate, detect tags, execute tools, repeat.

One run is strictly sequential; the feedback loop is inherently serial.
Three control policies steer generation:

1. every transcript is seeded with a fixed reasoning prefix,
2. too many tokens without a tool call inject a nudge back toward the
   database (cap 1400 tokens),
3. too many tokens overall inject a terminator and force one final
   completion (cap 10,000 tokens).

Budget checks happen at completion-chunk boundaries (after each stop or
length finish): providers cannot be interrupted mid-stream portably, so the
thresholds mean "first boundary past the cap". Injected text never counts
toward the caps; only model-generated tokens do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .backend import (
    FINISH_ERROR,
    FINISH_NATURAL,
    FINISH_STOP,
    Backend,
    CompletionRequest,
)
from .catalog import DbCatalog, ExecLimits, RenderedResult
from .catalog import (
    read_columns_documentation,
    read_table_columns,
    read_table_names,
    run_query,
)
from .model import (
    STATIC_TOOLS,
    AgentKind,
    ExplorationTrace,
    OperationRecord,
    Question,
    Termination,
    Tool,
    ToolCall,
)
from .protocol import EXECUTE_TAG, Malformed, parse_invocation, scan_stream

logger = logging.getLogger(__name__)

REASONING_PREFIX = (
    "Before thinking about the solution, I will have a deep understanding of "
    "the data and not make any assumptions about it."
)
NUDGE_TEXT = (
    "Wait, I am thinking for too long without interacting with the database. "
    "I can run queries and see the results with the command "
    "[RUN] run_query(...) [EXECUTE]"
)
TERMINATE_TEXT = "I am thinking for too long. I will generate my final solution now."

STATIC_REFUSAL = "run_query is not available"

PROMPTS_DIR = Path(__file__).parent / "prompts"

_RESULT_HEADER = "\nResult:\n"
_MAX_TURNS = 512  # hard stop against zero-token loops


class ControlAction(Enum):
    NONE = "none"
    INJECT_NUDGE = "inject_nudge"
    INJECT_TERMINATOR = "inject_terminator"


@dataclass
class AgentConfig:
    agent_kind: AgentKind
    backend: Backend
    no_tool_token_cap: int = 1400
    total_token_cap: int = 10000
    max_operations: int = 40
    reasoning_prefix: str = REASONING_PREFIX
    nudge_text: str = NUDGE_TEXT
    terminate_text: str = TERMINATE_TEXT
    limits: ExecLimits = field(default_factory=ExecLimits)
    turn_max_tokens: int = 2048
    final_max_tokens: int = 2048
    temperature: float = 0.0
    seed: int | None = None
    prompts_dir: Path | None = None

    def __post_init__(self):
        if not (0 < self.no_tool_token_cap < self.total_token_cap):
            raise ValueError("need 0 < no_tool_token_cap < total_token_cap")


@dataclass
class BudgetState:
    """Token accounting for one run; mutated at chunk boundaries."""

    tokens_total: int = 0
    tokens_since_last_tool: int = 0
    nudges_issued: int = 0
    terminated: bool = False
    nudge_armed: bool = True

    def note_tool_result(self) -> None:
        """A tool result was appended: reset the no-tool counter, re-arm the nudge."""
        self.tokens_since_last_tool = 0
        self.nudge_armed = True


def apply_control(budget: BudgetState, cfg: AgentConfig, new_tokens: int = 0) -> ControlAction:
    """Record chunk tokens and decide the control action for this boundary.

    The terminator takes precedence when both caps are crossed; the nudge
    fires at the first boundary past the no-tool cap and re-arms only when a
    tool result resets the counter.
    """
    budget.tokens_total += new_tokens
    budget.tokens_since_last_tool += new_tokens
    if budget.terminated:
        return ControlAction.NONE
    if budget.tokens_total > cfg.total_token_cap:
        budget.terminated = True
        return ControlAction.INJECT_TERMINATOR
    if budget.nudge_armed and budget.tokens_since_last_tool > cfg.no_tool_token_cap:
        budget.nudges_issued += 1
        budget.nudge_armed = False
        return ControlAction.INJECT_NUDGE
    return ControlAction.NONE


def load_prompt_template(name: str, prompts_dir: Path | None = None) -> str:
    path = (prompts_dir or PROMPTS_DIR) / name
    return path.read_text(encoding="utf-8")


def tool_list_text(agent_kind: AgentKind) -> str:
    signatures = {
        Tool.READ_TABLE_NAMES: "read_table_names()",
        Tool.READ_TABLE_COLUMNS: "read_table_columns(table_name: str)",
        Tool.READ_COLUMNS_DOCUMENTATION: "read_columns_documentation(column_names: list[str])",
        Tool.RUN_QUERY: "run_query(sql: str)",
    }
    tools = STATIC_TOOLS if agent_kind is AgentKind.STATIC else tuple(Tool)
    return "\n".join(f"- {signatures[t]}" for t in tools)


def _system_prompt(question: Question, cfg: AgentConfig) -> str:
    name = "static_agent.txt" if cfg.agent_kind is AgentKind.STATIC else "interaction_agent.txt"
    template = load_prompt_template(name, cfg.prompts_dir)
    return template.format(
        question=question.text,
        evidence=question.evidence or "(none)",
        tool_list=tool_list_text(cfg.agent_kind),
    )


def execute_tool(catalog: DbCatalog, call: ToolCall, limits: ExecLimits) -> RenderedResult:
    """Dispatch one parsed call against the catalog tools."""
    if call.tool is Tool.READ_TABLE_NAMES:
        return read_table_names(catalog)
    if call.tool is Tool.READ_TABLE_COLUMNS:
        return read_table_columns(catalog, call.args[0])
    if call.tool is Tool.READ_COLUMNS_DOCUMENTATION:
        return read_columns_documentation(catalog, call.args[0])
    return run_query(catalog, call.args[0], limits)


def run_agent(question: Question, catalog: DbCatalog, cfg: AgentConfig) -> ExplorationTrace:
    """Run one question through the exploration loop and record the trace."""
    system_text = _system_prompt(question, cfg)
    messages = (("system", system_text), ("user", question.text))

    transcript = cfg.reasoning_prefix
    budget = BudgetState()
    operations: list[OperationRecord] = []
    scan_pos = 0
    termination = Termination.NATURAL

    for _ in range(_MAX_TURNS):
        req = CompletionRequest(
            messages=messages,
            prefill=transcript,
            stop_sequences=(EXECUTE_TAG,),
            max_tokens=cfg.turn_max_tokens,
            temperature=cfg.temperature,
            seed=cfg.seed,
        )
        chunk = cfg.backend.complete(req)
        if chunk.finish == FINISH_ERROR:
            logger.warning("backend error for %s: %s", question.id, chunk.error)
            termination = Termination.BACKEND_ERROR
            break

        transcript += chunk.text
        if chunk.finish == FINISH_STOP and not transcript.endswith(EXECUTE_TAG):
            # defensive: a provider stripped the stop string
            transcript += EXECUTE_TAG

        hit_op_cap = False
        if chunk.finish == FINISH_STOP:
            invocation = scan_stream(transcript[scan_pos:])
            if invocation is not None:
                outcome = parse_invocation(invocation.raw)
                if isinstance(outcome, Malformed):
                    transcript += _RESULT_HEADER + f"could not parse command: {outcome.reason}\n"
                elif (
                    cfg.agent_kind is AgentKind.STATIC
                    and outcome.tool is Tool.RUN_QUERY
                ):
                    # told the model the tool does not exist; not an operation
                    transcript += _RESULT_HEADER + STATIC_REFUSAL + "\n"
                else:
                    rendered = execute_tool(catalog, outcome, cfg.limits)
                    operations.append(
                        OperationRecord(
                            index=len(operations),
                            call=outcome,
                            rendered_result=rendered.text,
                            row_count=rendered.row_count if rendered.error is None else None,
                            error=rendered.error,
                            truncated=rendered.truncated,
                        )
                    )
                    transcript += _RESULT_HEADER + rendered.text + "\n"
                    budget.note_tool_result()
                    if len(operations) >= cfg.max_operations:
                        hit_op_cap = True
            # skip everything appended so far: injected results (which may
            # carry tag-like data) must never be scanned as commands
            scan_pos = len(transcript)

        action = apply_control(budget, cfg, chunk.token_count)
        if action is ControlAction.INJECT_TERMINATOR:
            transcript += "\n" + cfg.terminate_text
            final = cfg.backend.complete(
                CompletionRequest(
                    messages=messages,
                    prefill=transcript,
                    stop_sequences=(),
                    max_tokens=cfg.final_max_tokens,
                    temperature=cfg.temperature,
                    seed=cfg.seed,
                )
            )
            if final.finish != FINISH_ERROR:
                transcript += final.text
                budget.tokens_total += final.token_count
            termination = Termination.FORCED_BUDGET
            break
        if action is ControlAction.INJECT_NUDGE:
            # the nudge itself shows the [RUN]/[EXECUTE] tags; keep it out of
            # the scan window or it would parse as a command
            transcript += "\n" + cfg.nudge_text
            scan_pos = len(transcript)

        if hit_op_cap:
            logger.info("question %s hit max_operations=%d", question.id, cfg.max_operations)
            termination = Termination.FORCED_BUDGET
            break
        if chunk.finish == FINISH_NATURAL:
            termination = Termination.NATURAL
            break
    else:
        termination = Termination.FORCED_BUDGET

    return ExplorationTrace(
        question_id=question.id,
        agent_kind=cfg.agent_kind,
        operations=tuple(operations),
        raw_transcript=transcript,
        tokens_generated=budget.tokens_total,
        termination=termination,
    )
