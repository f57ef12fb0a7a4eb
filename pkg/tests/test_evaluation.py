"""Execution matching, Best-of-N, stratified sampling, scaling mechanics."""

from __future__ import annotations

import random

import pytest

from sqlscout.errors import ExecutionError
from sqlscout.evaluation import (
    CandidateFlag,
    EvalRecord,
    ResultSet,
    best_of_n,
    execute_for_eval,
    execution_match,
    stratified_sample,
)
from sqlscout.model import CellValue, Difficulty, Question, canonicalize_value


# ── Independent oracle: brute-force set comparison, no set() machinery ───────


def oracle_cells_equal(x, y) -> bool:
    # same contract, separate implementation: numeric kinds compare by value
    numeric = ("integer", "real")
    if x.kind in numeric and y.kind in numeric:
        return x.value == y.value
    return x.kind == y.kind and x.value == y.value


def oracle_rows_equal(a, b) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if not oracle_cells_equal(x, y):
            return False
    return True


def oracle_contains(rows, row) -> bool:
    for candidate in rows:
        if oracle_rows_equal(candidate, row):
            return True
    return False


def oracle_match(pred: ResultSet, gold: ResultSet) -> bool:
    """Set equality by double inclusion, written without hashing."""
    if pred.column_count != gold.column_count:
        return False
    for row in pred.rows:
        if not oracle_contains(gold.rows, row):
            return False
    for row in gold.rows:
        if not oracle_contains(pred.rows, row):
            return False
    return True


_CELL_POOL = [None, 0, 1, 2, -1, 1.5, 2.0, "a", "b", "", "NULL"]


def random_result_set(rng: random.Random, column_count=None, max_rows=6) -> ResultSet:
    cols = column_count or rng.randint(1, 4)
    n_rows = rng.randint(0, max_rows)
    rows = tuple(
        tuple(canonicalize_value(rng.choice(_CELL_POOL)) for _ in range(cols))
        for _ in range(n_rows)
    )
    return ResultSet(rows=rows, column_count=cols)


def permute_rows(rng: random.Random, rs: ResultSet) -> ResultSet:
    rows = list(rs.rows)
    rng.shuffle(rows)
    return ResultSet(rows=tuple(rows), column_count=rs.column_count)


def permute_columns(rng: random.Random, rs: ResultSet) -> ResultSet:
    order = list(range(rs.column_count))
    while True:
        rng.shuffle(order)
        if order != sorted(order) or rs.column_count == 1:
            break
    rows = tuple(tuple(row[i] for i in order) for row in rs.rows)
    return ResultSet(rows=rows, column_count=rs.column_count)


class TestExecutionMatch:
    def test_reflexive(self):
        rs = ResultSet(rows=((CellValue("integer", 1),),), column_count=1)
        assert execution_match(rs, rs)

    def test_row_order_ignored(self):
        rng = random.Random(0)
        rs = random_result_set(rng, column_count=2, max_rows=5)
        shuffled = permute_rows(rng, rs)
        assert execution_match(rs, shuffled)
        assert oracle_match(rs, shuffled)

    def test_extra_column_is_wrong(self):
        one = ResultSet(rows=((CellValue("integer", 1),),), column_count=1)
        two = ResultSet(
            rows=((CellValue("integer", 1), CellValue("integer", 1)),), column_count=2
        )
        assert not execution_match(two, one)

    def test_duplicates_collapse(self):
        a = ResultSet(rows=((CellValue("integer", 1),), (CellValue("integer", 1),)), column_count=1)
        b = ResultSet(rows=((CellValue("integer", 1),),), column_count=1)
        assert execution_match(a, b)
        assert oracle_match(a, b)

    def test_null_equals_null(self):
        a = ResultSet(rows=((CellValue("null"),),), column_count=1)
        b = ResultSet(rows=((CellValue("null"),),), column_count=1)
        assert execution_match(a, b)

    def test_integer_equals_equal_real(self):
        # reference-evaluator semantics: set comparison over raw tuples,
        # where Python says 2 == 2.0
        a = ResultSet(rows=((CellValue("integer", 2),),), column_count=1)
        b = ResultSet(rows=((CellValue("real", 2.0),),), column_count=1)
        assert execution_match(a, b)
        assert oracle_match(a, b)

    def test_text_never_equals_number(self):
        a = ResultSet(rows=((CellValue("text", "2"),),), column_count=1)
        b = ResultSet(rows=((CellValue("integer", 2),),), column_count=1)
        assert not execution_match(a, b)
        assert not oracle_match(a, b)

    def test_agrees_with_oracle_on_random_pairs(self):
        rng = random.Random(42)
        agreements = 0
        for i in range(600):
            a = random_result_set(rng)
            mode = i % 4
            if mode == 0:
                b = permute_rows(rng, a)
            elif mode == 1:
                b = permute_columns(rng, a)
            elif mode == 2:
                b = random_result_set(rng, column_count=a.column_count)
            else:
                b = random_result_set(rng)
            assert execution_match(a, b) == oracle_match(a, b)
            agreements += 1
        assert agreements == 600

    def test_symmetry(self):
        rng = random.Random(3)
        for _ in range(100):
            a = random_result_set(rng)
            b = random_result_set(rng)
            assert execution_match(a, b) == execution_match(b, a)


class TestExecuteForEval:
    def test_select_one(self, pets_catalog):
        rs = execute_for_eval("SELECT 1", pets_catalog)
        assert rs.column_count == 1
        assert rs.rows == ((CellValue("integer", 1),),)

    def test_fixture_rows_canonicalized(self, pets_catalog):
        rs = execute_for_eval("SELECT species, age FROM pet", pets_catalog)
        assert len(rs.rows) == 3
        kinds = {cell.kind for row in rs.rows for cell in row}
        assert kinds == {"text", "real"}

    def test_invalid_sql_raises(self, pets_catalog):
        with pytest.raises(ExecutionError):
            execute_for_eval("SELECT definitely broken FROM", pets_catalog)

    def test_write_rejected(self, pets_catalog):
        with pytest.raises(ExecutionError):
            execute_for_eval("DELETE FROM pet", pets_catalog)

    def test_row_ceiling(self, pets_catalog):
        big = (
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c LIMIT 2000) "
            "SELECT * FROM c"
        )
        with pytest.raises(ExecutionError) as err:
            execute_for_eval(big, pets_catalog, row_ceiling=1000)
        assert "ceiling" in str(err.value)


def _record(qid: str, first_round: int | None) -> EvalRecord:
    flags = []
    if first_round is not None:
        flags.append(CandidateFlag("b", first_round, False, True))
    flags.append(CandidateFlag("b", 1, False, False))
    return EvalRecord.from_flags(qid, flags, Difficulty.UNKNOWN)


class TestBestOfN:
    def test_half_solved_at_every_n(self):
        records = [_record("a", 1), _record("b", None)]
        for n in range(1, 9):
            assert best_of_n(records, n) == 0.5

    def test_counted_only_from_its_round(self):
        records = [_record("a", 3)]
        assert best_of_n(records, 2) == 0.0
        assert best_of_n(records, 3) == 1.0

    def test_monotone_on_random_fixtures(self):
        rng = random.Random(5)
        for _ in range(200):
            records = [
                _record(f"q{i}", rng.choice([None, 1, 2, 3, 4, 5, 6, 7, 8]))
                for i in range(rng.randint(1, 12))
            ]
            # brute-force oracle: evaluate all prefixes directly
            values = [best_of_n(records, n) for n in range(1, 9)]
            assert values == sorted(values)

    def test_empty_records(self):
        assert best_of_n([], 3) == 0.0

    def test_first_correct_round_invariant(self):
        rec = _record("a", None)
        assert rec.first_correct_round is None
        rec = _record("a", 2)
        assert rec.first_correct_round == 2


def _questions(counts: dict[Difficulty, int]) -> list[Question]:
    out = []
    i = 0
    for difficulty, n in counts.items():
        for _ in range(n):
            out.append(
                Question(id=f"q{i:03d}", db_id="d", text=f"t{i}", difficulty=difficulty)
            )
            i += 1
    return out


def largest_remainder_oracle(sizes: list[int], fraction: float) -> list[int]:
    """Independent allocation oracle."""
    total_target = int(round(fraction * sum(sizes)))
    quotas = [fraction * s for s in sizes]
    counts = [int(q) for q in quotas]
    order = sorted(
        range(len(sizes)), key=lambda i: -(quotas[i] - counts[i])
    )
    leftover = total_target - sum(counts)
    for i in order:
        if leftover <= 0:
            break
        counts[i] += 1
        leftover -= 1
    return counts


class TestStratifiedSample:
    def test_sixty_thirty_ten_at_ten_percent(self):
        questions = _questions(
            {Difficulty.SIMPLE: 60, Difficulty.MODERATE: 30, Difficulty.CHALLENGING: 10}
        )
        assert largest_remainder_oracle([60, 30, 10], 0.1) == [6, 3, 1]
        sample = stratified_sample(questions, 0.1, seed=7)
        by_stratum = {}
        for q in sample:
            by_stratum[q.difficulty] = by_stratum.get(q.difficulty, 0) + 1
        assert by_stratum == {
            Difficulty.SIMPLE: 6,
            Difficulty.MODERATE: 3,
            Difficulty.CHALLENGING: 1,
        }

    def test_fraction_one_is_identity(self):
        questions = _questions({Difficulty.SIMPLE: 5})
        assert stratified_sample(questions, 1.0, seed=1) == questions

    def test_same_seed_same_sample(self):
        questions = _questions({Difficulty.SIMPLE: 50, Difficulty.MODERATE: 20})
        a = stratified_sample(questions, 0.3, seed=11)
        b = stratified_sample(questions, 0.3, seed=11)
        assert a == b

    def test_different_seed_usually_differs(self):
        questions = _questions({Difficulty.SIMPLE: 50})
        a = stratified_sample(questions, 0.3, seed=1)
        b = stratified_sample(questions, 0.3, seed=2)
        assert a != b

    def test_allocation_matches_oracle_on_uneven_strata(self):
        counts = {Difficulty.SIMPLE: 7, Difficulty.MODERATE: 5, Difficulty.CHALLENGING: 3}
        questions = _questions(counts)
        sample = stratified_sample(questions, 0.5, seed=3)
        got = [
            sum(1 for q in sample if q.difficulty is d)
            for d in (Difficulty.SIMPLE, Difficulty.MODERATE, Difficulty.CHALLENGING)
        ]
        assert got == largest_remainder_oracle([7, 5, 3], 0.5)
        assert len(sample) == sum(got)

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            stratified_sample(_questions({Difficulty.SIMPLE: 3}), 0.0, seed=1)
        with pytest.raises(ValueError):
            stratified_sample(_questions({Difficulty.SIMPLE: 3}), 1.5, seed=1)

    def test_empty_input(self):
        assert stratified_sample([], 0.5, seed=1) == []

    def test_output_preserves_input_order(self):
        questions = _questions({Difficulty.SIMPLE: 30})
        sample = stratified_sample(questions, 0.4, seed=9)
        ids = [q.id for q in sample]
        assert ids == sorted(ids)


class TestRunScalingExperiment:
    def test_fresh_exploration_mode(self, pets_catalog):
        from sqlscout.agent import AgentConfig
        from sqlscout.backend import scripted_backend
        from sqlscout.evaluation import run_scaling_experiment
        from sqlscout.model import AgentKind

        explore = scripted_backend(
            [
                "[RUN] run_query(SELECT count(*) FROM pet) [EXECUTE]",
                "```sql\nSELECT 1\n```",
            ],
            loop=True,
        )
        generate = scripted_backend(["```sql\nSELECT count(*) FROM pet\n```"], loop=True)
        question = Question(
            id="q", db_id="pets", text="how many pets?", gold_sql="SELECT count(*) FROM pet"
        )
        points = run_scaling_experiment(
            questions=[question],
            catalog_resolver=lambda db_id: pets_catalog,
            agent_cfgs={
                AgentKind.INTERACTION: AgentConfig(
                    agent_kind=AgentKind.INTERACTION, backend=explore
                )
            },
            ks=[0, 3],
            refinement_modes=(False, True),
            backend=generate,
        )
        assert len(points) == 4  # 2 ks x 2 refinement modes
        assert all(p.execution_accuracy == 1.0 for p in points)
        kinds = {p.agent_kind for p in points}
        assert kinds == {AgentKind.INTERACTION}
