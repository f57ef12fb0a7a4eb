"""Agentic text-to-SQL runtime and evaluation harness."""

from .model import (
    AgentKind,
    CellValue,
    Difficulty,
    ExecOutcome,
    ExplorationTrace,
    OperationRecord,
    Question,
    SqlCandidate,
    Termination,
    Tool,
    ToolCall,
    canonicalize_value,
    parse_question_record,
)
from .catalog import DbCatalog, DocEntry, ExecLimits, RenderedResult, attach_database
from .protocol import extract_final_sql, parse_invocation, render_invocation, scan_stream
from .backend import CompletionChunk, CompletionRequest, HttpBackend, scripted_backend
from .agent import AgentConfig, BudgetState, apply_control, run_agent
from .generation import (
    GenerationPrompt,
    RefinementOutcome,
    build_generation_prompt,
    fan_out_candidates,
    generate_sql,
    postprocess_columns,
    refine_sql,
)
from .evaluation import (
    EvalRecord,
    ResultSet,
    ScalingPoint,
    best_of_n,
    execute_for_eval,
    execution_match,
    run_scaling_experiment,
    stratified_sample,
)
from .store import Dataset, RunManifest, TraceStore, ingest_bird_layout

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AgentKind",
    "BudgetState",
    "CellValue",
    "CompletionChunk",
    "CompletionRequest",
    "Dataset",
    "DbCatalog",
    "Difficulty",
    "DocEntry",
    "EvalRecord",
    "ExecLimits",
    "ExecOutcome",
    "ExplorationTrace",
    "GenerationPrompt",
    "HttpBackend",
    "OperationRecord",
    "Question",
    "RefinementOutcome",
    "RenderedResult",
    "ResultSet",
    "RunManifest",
    "ScalingPoint",
    "SqlCandidate",
    "Termination",
    "Tool",
    "ToolCall",
    "TraceStore",
    "apply_control",
    "attach_database",
    "best_of_n",
    "build_generation_prompt",
    "canonicalize_value",
    "execute_for_eval",
    "execution_match",
    "extract_final_sql",
    "fan_out_candidates",
    "generate_sql",
    "ingest_bird_layout",
    "parse_invocation",
    "parse_question_record",
    "postprocess_columns",
    "refine_sql",
    "render_invocation",
    "run_agent",
    "run_scaling_experiment",
    "scan_stream",
    "scripted_backend",
    "stratified_sample",
]
