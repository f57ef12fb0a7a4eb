"""Command-line entry points for the two-phase pipeline.

Subcommands: explore (phase one: run agents, store traces), generate (phase
two: build prompts at depth k, refine, fan out, store candidates), eval
(execution accuracy and Best-of-N), scaling (depth sweep), ask (one ad-hoc
question against one database), sample (materialize a stratified sample).

`generate`, `eval`, and `scaling` operate solely on stored traces; they never
re-run exploration. Exit codes: 0 success, 1 partial failures, 2
configuration errors.
"""

from __future__ import annotations

import argparse
import csv as csv_module
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .agent import AgentConfig, run_agent
from .backend import Backend, HttpBackend, ScriptedBackend, scripted_backend
from .catalog import DbCatalog, ExecLimits, attach_database, run_query
from .errors import ConfigError, IngestError, SqlScoutError, TraceExistsError
from .evaluation import (
    CandidateFlag,
    EvalRecord,
    ExecutionError,
    ResultSet,
    best_of_n,
    candidate_matches,
    execute_for_eval,
    stratified_sample,
)
from .generation import build_generation_prompt, fan_out_candidates, refine_sql
from .model import AgentKind, Question
from .store import Dataset, RunManifest, TraceStore, ingest_bird_layout

logger = logging.getLogger(__name__)

DEFAULT_KS = (0, 3, 7, 15, 31)
DEFAULT_K = 15

TAPE_SEPARATOR = "---"


# ── Configuration ────────────────────────────────────────────────────────────


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    base = path.parent
    for key in ("dataset_root", "store_root", "prompts_dir"):
        if config.get(key):
            config[key] = str((base / config[key]).resolve())
    for spec in (config.get("backends") or {}).values():
        if isinstance(spec, dict) and spec.get("tape_file"):
            spec["tape_file"] = str((base / spec["tape_file"]).resolve())
    return config


def read_tape_file(path: str | Path) -> list[str]:
    """A tape file holds responses separated by lines equal to '---'."""
    text = Path(path).read_text(encoding="utf-8")
    entries: list[str] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip() == TAPE_SEPARATOR:
            entries.append("\n".join(current).strip())
            current = []
        else:
            current.append(line)
    tail = "\n".join(current).strip()
    if tail:
        entries.append(tail)
    entries = [e for e in entries if e]
    if not entries:
        raise ConfigError(f"tape file {path} holds no responses")
    return entries


def build_backend(name: str, spec: dict) -> Backend:
    kind = spec.get("type", "http")
    if kind == "scripted":
        if spec.get("tape_file"):
            tape = read_tape_file(spec["tape_file"])
        elif spec.get("tape"):
            tape = list(spec["tape"])
        else:
            raise ConfigError(f"scripted backend {name!r} needs tape or tape_file")
        matchers = [tuple(m) for m in spec.get("matchers", [])]
        return scripted_backend(tape, matchers=matchers, name=name, loop=bool(spec.get("loop", False)))
    if kind == "http":
        if not spec.get("base_url") or not spec.get("model"):
            raise ConfigError(f"http backend {name!r} needs base_url and model")
        return HttpBackend(
            name=name,
            base_url=spec["base_url"],
            model=spec["model"],
            api_key=spec.get("api_key"),
            api_key_env=spec.get("api_key_env"),
            supports_prefill=bool(spec.get("supports_prefill", False)),
            forward_stop=bool(spec.get("forward_stop", False)),
            timeout_s=float(spec.get("timeout_s", 120.0)),
        )
    raise ConfigError(f"unknown backend type {kind!r} for {name!r}")


def build_backends(config: dict) -> dict[str, Backend]:
    specs = config.get("backends") or {}
    if not specs:
        raise ConfigError("config declares no backends")
    return {name: build_backend(name, spec) for name, spec in specs.items()}


def _limits(config: dict) -> ExecLimits:
    raw = config.get("limits") or {}
    return ExecLimits(
        row_cap=int(raw.get("row_cap", 20)),
        cell_width=int(raw.get("cell_width", 80)),
        timeout_s=float(raw.get("timeout_s", 30.0)),
    )


def _agent_config(config: dict, kind: AgentKind, backend: Backend) -> AgentConfig:
    raw = config.get("agent") or {}
    prompts_dir = Path(config["prompts_dir"]) if config.get("prompts_dir") else None
    return AgentConfig(
        agent_kind=kind,
        backend=backend,
        no_tool_token_cap=int(raw.get("no_tool_token_cap", 1400)),
        total_token_cap=int(raw.get("total_token_cap", 10000)),
        max_operations=int(raw.get("max_operations", 40)),
        limits=_limits(config),
        turn_max_tokens=int(raw.get("turn_max_tokens", 2048)),
        final_max_tokens=int(raw.get("final_max_tokens", 2048)),
        temperature=float(raw.get("temperature", 0.0)),
        seed=config.get("seed"),
        prompts_dir=prompts_dir,
    )


def _sampled_questions(dataset: Dataset, config: dict, seed_override: int | None) -> list[Question]:
    fraction = float(config.get("sample_fraction", 1.0))
    seed = int(seed_override if seed_override is not None else config.get("seed", 0))
    if fraction >= 1.0:
        return list(dataset.questions)
    return stratified_sample(dataset.questions, fraction, seed)


def _effective_workers(config: dict, args_workers: int | None, backends: dict[str, Backend]) -> int:
    workers = args_workers if args_workers is not None else int(config.get("workers", 1))
    if workers > 1 and any(isinstance(b, ScriptedBackend) for b in backends.values()):
        logger.info("scripted backends in use; forcing workers=1 for determinism")
        return 1
    return max(1, workers)


# ── Subcommands ──────────────────────────────────────────────────────────────


def cmd_explore(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    store = TraceStore(args.store or config.get("store_root", "runs"))
    dataset = ingest_bird_layout(config["dataset_root"])
    backends = build_backends(config)
    explore_name = config.get("explore_backend")
    if not explore_name or explore_name not in backends:
        raise ConfigError(f"explore_backend {explore_name!r} is not a configured backend")
    backend = backends[explore_name]

    questions = _sampled_questions(dataset, config, args.seed)
    kinds = [AgentKind(k) for k in config.get("agent_kinds", ["interaction"])]
    workers = _effective_workers(config, args.workers, {explore_name: backend})

    manifest = RunManifest.create(args.run_id, config, dataset)
    store.write_manifest(manifest)

    import threading

    catalogs: dict[str, DbCatalog] = {}
    catalogs_lock = threading.Lock()

    def catalog_for(db_id: str) -> DbCatalog:
        # catalog values are immutable and shareable; workers each open their
        # own connections per tool call
        with catalogs_lock:
            if db_id not in catalogs:
                catalogs[db_id] = dataset.catalog(db_id)
            return catalogs[db_id]

    failures = 0
    for kind in kinds:
        cfg = _agent_config(config, kind, backend)
        todo = [
            q for q in questions
            if args.force or not store.has_trace(args.run_id, kind, q.id)
        ]
        skipped = len(questions) - len(todo)
        if skipped:
            logger.info("%s: %d question(s) already explored; skipping", kind.value, skipped)

        def explore_one(q: Question):
            return q, run_agent(q, catalog_for(q.db_id), cfg)

        results = []
        if workers == 1:
            for q in todo:
                try:
                    results.append(explore_one(q))
                except Exception as exc:
                    logger.error("exploration failed for %s: %s", q.id, exc)
                    results.append((q, exc))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(explore_one, q): q for q in todo}
                for future, q in futures.items():
                    try:
                        results.append(future.result())
                    except Exception as exc:
                        logger.error("exploration failed for %s: %s", q.id, exc)
                        results.append((q, exc))

        for q, outcome in sorted(results, key=lambda pair: pair[0].id):
            if isinstance(outcome, Exception):
                failures += 1
                continue
            store.write_trace(args.run_id, outcome, force=args.force)
            print(
                f"explored {q.id} [{kind.value}]: {len(outcome.operations)} operation(s), "
                f"{outcome.tokens_generated} tokens, {outcome.termination.value}"
            )
    return 1 if failures else 0


def cmd_generate(args) -> int:
    store = TraceStore(args.store or "runs")
    config = load_config(args.config) if args.config else store.read_manifest(args.run_id).config
    dataset = ingest_bird_layout(config["dataset_root"])
    backends = build_backends(config)

    names = args.backend or config.get("generation_backends") or list(backends)
    missing = [n for n in names if n not in backends]
    if missing:
        raise ConfigError(f"unknown generation backend(s): {', '.join(missing)}")
    generation = [backends[n] for n in names]
    postprocess = tuple(config.get("postprocess_backends", ()))

    k = args.k if args.k is not None else int(config.get("default_k", DEFAULT_K))
    rounds = args.rounds if args.rounds is not None else int(config.get("rounds", 1))
    kind = AgentKind(config.get("generation_agent_kind", "interaction"))
    limits = _limits(config)
    prompts_dir = Path(config["prompts_dir"]) if config.get("prompts_dir") else None

    catalogs: dict[str, DbCatalog] = {}
    failures = 0
    produced = 0
    for trace in store.iter_traces(args.run_id, kind):
        question = dataset.question_by_id(trace.question_id)
        if question is None:
            logger.warning("stored trace for unknown question %s; skipped", trace.question_id)
            failures += 1
            continue
        if store.candidates_path(args.run_id, k, question.id).exists() and not args.force:
            logger.info("candidates exist for %s at k=%d; skipping", question.id, k)
            continue
        if question.db_id not in catalogs:
            catalogs[question.db_id] = dataset.catalog(question.db_id)
        candidates = fan_out_candidates(
            question,
            trace,
            k,
            generation,
            rounds,
            catalogs[question.db_id],
            postprocess_backends=postprocess,
            timeout_s=limits.timeout_s,
            prompts_dir=prompts_dir,
        )
        store.write_candidates(args.run_id, k, question.id, candidates, force=args.force)
        produced += len(candidates)
        print(f"generated {len(candidates)} candidate(s) for {question.id} at k={k}")
    print(f"total candidates: {produced}")
    return 1 if failures else 0


def _eval_records(
    store: TraceStore, dataset: Dataset, run_id: str, k: int, timeout_s: float
) -> list[EvalRecord]:
    candidates_by_q = store.read_candidates(run_id, k)
    catalogs: dict[str, DbCatalog] = {}
    records: list[EvalRecord] = []
    for qid in sorted(candidates_by_q):
        question = dataset.question_by_id(qid)
        if question is None or not question.gold_sql:
            logger.warning("no gold SQL for %s; skipped", qid)
            continue
        if question.db_id not in catalogs:
            catalogs[question.db_id] = dataset.catalog(question.db_id)
        catalog = catalogs[question.db_id]
        try:
            gold: ResultSet | None = execute_for_eval(question.gold_sql, catalog, timeout_s=timeout_s)
        except ExecutionError as exc:
            logger.warning("gold SQL failed for %s: %s", qid, exc)
            gold = None
        flags = [
            CandidateFlag(
                backend_id=c.backend_id,
                round=c.round,
                postprocessed=c.postprocessed,
                matched=candidate_matches(c.sql, gold, catalog, timeout_s=timeout_s),
            )
            for c in candidates_by_q[qid]
        ]
        records.append(EvalRecord.from_flags(qid, flags, question.difficulty))
    return records


def cmd_eval(args) -> int:
    store = TraceStore(args.store or "runs")
    config = load_config(args.config) if args.config else store.read_manifest(args.run_id).config
    dataset = ingest_bird_layout(config["dataset_root"])
    limits = _limits(config)

    ks = store.candidate_ks(args.run_id)
    if not ks:
        raise ConfigError(f"run {args.run_id!r} holds no candidates; run generate first")
    k = args.k if args.k is not None else ks[-1]
    if k not in ks:
        raise ConfigError(f"no candidates at k={k}; available: {ks}")

    records = _eval_records(store, dataset, args.run_id, k, limits.timeout_s)
    if not records:
        print("no scoreable questions")
        return 1

    max_round = max((f.round for r in records for f in r.flags), default=1)
    best_of = args.best_of or max_round
    curve = {n: best_of_n(records, n) for n in range(1, best_of + 1)}

    branches = sorted({(f.backend_id, f.postprocessed) for r in records for f in r.flags})
    branch_ex = {}
    for backend_id, post in branches:
        matched = sum(
            1
            for r in records
            if any(
                f.matched and f.backend_id == backend_id and f.postprocessed == post and f.round == 1
                for f in r.flags
            )
        )
        label = f"{backend_id}+columns" if post else backend_id
        branch_ex[label] = matched / len(records)

    record_lines = [
        {
            "format_version": 1,
            "question_id": r.question_id,
            "stratum": r.stratum.value,
            "first_correct_round": r.first_correct_round,
            "flags": [
                {
                    "backend_id": f.backend_id,
                    "round": f.round,
                    "postprocessed": f.postprocessed,
                    "matched": f.matched,
                }
                for f in r.flags
            ],
        }
        for r in records
    ]
    summary = {
        "k": k,
        "n_questions": len(records),
        "execution_accuracy": branch_ex,
        "best_of_n": {str(n): curve[n] for n in curve},
    }
    report_path, summary_path = store.write_report(args.run_id, record_lines, summary)

    print(f"questions scored: {len(records)} (k={k})")
    print()
    print("Execution accuracy per branch (round 1):")
    for label, value in branch_ex.items():
        print(f"  {label:<24} {value:6.1%}")
    print()
    print("Best-of-N curve:")
    for n, value in curve.items():
        print(f"  n={n:<3} {value:6.1%}")
    print()
    print(f"report: {report_path}")
    print(f"summary: {summary_path}")
    return 0


def cmd_scaling(args) -> int:
    store = TraceStore(args.store or "runs")
    config = load_config(args.config) if args.config else store.read_manifest(args.run_id).config
    dataset = ingest_bird_layout(config["dataset_root"])
    backends = build_backends(config)
    limits = _limits(config)
    prompts_dir = Path(config["prompts_dir"]) if config.get("prompts_dir") else None

    name = args.backend or (config.get("generation_backends") or [None])[0]
    if not name or name not in backends:
        raise ConfigError(f"scaling backend {name!r} is not a configured backend")
    backend = backends[name]

    if args.ks:
        ks = [int(x) for x in args.ks.split(",")]
    else:
        ks = list(config.get("ks", DEFAULT_KS))
    refinement_modes = {"both": (False, True), "on": (True,), "off": (False,)}[args.refinement]

    from .evaluation import run_scaling_experiment

    kinds = [AgentKind(x) for x in config.get("agent_kinds", ["interaction", "static"])]
    questions = [
        q for q in dataset.questions
        if any(store.has_trace(args.run_id, kind, q.id) for kind in kinds)
    ]
    if not questions:
        raise ConfigError(f"run {args.run_id!r} holds no traces; run explore first")

    def trace_provider(kind: AgentKind, qid: str):
        if store.has_trace(args.run_id, kind, qid):
            return store.read_trace(args.run_id, kind, qid)
        return None

    catalogs: dict[str, DbCatalog] = {}

    def catalog_for(db_id: str) -> DbCatalog:
        if db_id not in catalogs:
            catalogs[db_id] = dataset.catalog(db_id)
        return catalogs[db_id]

    points = run_scaling_experiment(
        questions,
        catalog_for,
        {kind: None for kind in kinds},
        ks,
        refinement_modes,
        backend,
        trace_provider=trace_provider,
        timeout_s=limits.timeout_s,
        prompts_dir=prompts_dir,
    )

    csv_path = store.run_dir(args.run_id) / "scaling.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv_module.writer(fh)
        writer.writerow(["configuration", "k", "execution_accuracy"])
        for p in points:
            label = f"{p.agent_kind.value}+refine" if p.refinement_enabled else p.agent_kind.value
            writer.writerow([label, p.k, f"{p.execution_accuracy:.6f}"])

    print(f"{'configuration':<24} {'k':>4}  EX")
    for p in points:
        label = f"{p.agent_kind.value}+refine" if p.refinement_enabled else p.agent_kind.value
        print(f"{label:<24} {p.k:>4}  {p.execution_accuracy:6.1%}")
    print(f"csv: {csv_path}")
    return 0


def cmd_ask(args) -> int:
    config = load_config(args.config) if args.config else {}
    if args.tape:
        backend: Backend = scripted_backend(read_tape_file(args.tape), name="scripted")
    else:
        backends = build_backends(config)
        name = args.backend or config.get("explore_backend")
        if not name or name not in backends:
            raise ConfigError(f"ask backend {name!r} is not a configured backend")
        backend = backends[name]

    catalog = attach_database(args.db, args.docs)
    question = Question(
        id="adhoc",
        db_id=catalog.db_id,
        text=args.question,
        evidence=args.evidence or "",
    )
    cfg = _agent_config(config, AgentKind.INTERACTION, backend)
    trace = run_agent(question, catalog, cfg)
    print(f"exploration: {len(trace.operations)} operation(s), {trace.termination.value}")

    prompt = build_generation_prompt(question, trace, len(trace.operations))
    outcome = refine_sql(
        prompt, backend, catalog,
        timeout_s=cfg.limits.timeout_s,
        prompts_dir=cfg.prompts_dir,
    )
    sql = outcome.final.sql
    if not sql:
        print("no SQL produced")
        return 1
    print("\nfinal SQL:")
    print(sql)
    rendered = run_query(catalog, sql, cfg.limits)
    print("\nresult:")
    print(rendered.text)
    return 0


def cmd_sample(args) -> int:
    config = load_config(args.config)
    dataset = ingest_bird_layout(config["dataset_root"])
    fraction = args.fraction if args.fraction is not None else float(config.get("sample_fraction", 0.1))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    sample = stratified_sample(dataset.questions, fraction, seed)
    records = [
        {
            "question_id": q.id,
            "db_id": q.db_id,
            "question": q.text,
            "evidence": q.evidence,
            "SQL": q.gold_sql,
            "difficulty": q.difficulty.value,
        }
        for q in sample
    ]
    text = json.dumps(records, indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(sample)} question(s) to {args.out} (seed={seed}, fraction={fraction})")
    else:
        sys.stdout.write(text)
    return 0


# ── Dispatch ─────────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sqlscout",
        description="Agentic text-to-SQL exploration, generation, and evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--store", help="store root directory (default: runs)")
        p.add_argument("--run-id", required=True, help="run identifier")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--force", action="store_true", help="rewrite existing records")
        p.add_argument("--workers", type=int, help="worker pool width")

    p = sub.add_parser("explore", help="phase one: run agents over the sampled questions")
    common(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("generate", help="phase two: candidates from stored traces at depth k")
    common(p, config_required=False)
    p.add_argument("--k", type=int, help="exploration depth (operations included)")
    p.add_argument("--rounds", type=int, help="fan-out rounds")
    p.add_argument("--backend", action="append", help="generation backend name (repeatable)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="execution accuracy and Best-of-N over stored candidates")
    common(p, config_required=False)
    p.add_argument("--k", type=int, help="candidate depth to evaluate")
    p.add_argument("--best-of", type=int, help="Best-of-N table through this n")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scaling", help="depth sweep over stored traces")
    common(p, config_required=False)
    p.add_argument("--ks", help="comma-separated depths, e.g. 0,3,7,15,31")
    p.add_argument("--refinement", choices=("both", "on", "off"), default="both")
    p.add_argument("--backend", help="generation backend for the sweep")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("ask", help="one ad-hoc question against one database")
    p.add_argument("--db", required=True, help="SQLite database file")
    p.add_argument("--docs", help="database_description directory")
    p.add_argument("--question", required=True)
    p.add_argument("--evidence")
    p.add_argument("--config", help="JSON config file (for configured backends)")
    p.add_argument("--backend", help="backend name from the config")
    p.add_argument("--tape", help="scripted tape file (responses separated by ---)")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("sample", help="materialize a stratified question sample")
    p.add_argument("--config", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output JSON file (default: stdout)")
    p.set_defaults(func=cmd_sample)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TraceExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SqlScoutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
