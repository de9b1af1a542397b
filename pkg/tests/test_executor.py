from __future__ import annotations

import hashlib
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpsql.executor import (
    STATUS_OK,
    STATUS_RUNTIME_ERROR,
    STATUS_SYNTAX_ERROR,
    STATUS_TIMEOUT,
    ExecutionOutcome,
    TimingError,
    execute,
    normalize_and_fingerprint,
    time_query,
)

from equivalence_suite import PAIRS

RUNAWAY = (
    "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) "
    "SELECT count(*) FROM c"
)


class TestExecute:
    def test_select_one(self, tox_db_path):
        outcome = execute(tox_db_path, "SELECT 1")
        assert outcome.status == STATUS_OK
        assert outcome.row_count == 1
        assert outcome.exec_time_ms >= 0

    def test_syntax_error(self, tox_db_path):
        outcome = execute(tox_db_path, "SELEC 1")
        assert outcome.status == STATUS_SYNTAX_ERROR
        assert outcome.fingerprint is None

    def test_unknown_table_is_runtime_error(self, tox_db_path):
        assert execute(tox_db_path, "SELECT * FROM nope").status == STATUS_RUNTIME_ERROR

    def test_write_statements_rejected_and_db_untouched(self, tox_db_path):
        before = hashlib.sha256(tox_db_path.read_bytes()).hexdigest()
        for sql in (
            "INSERT INTO molecule VALUES ('TR999', '+')",
            "UPDATE molecule SET label = '-'",
            "DELETE FROM bond",
            "DROP TABLE molecule",
            "CREATE TABLE x (a)",
        ):
            assert execute(tox_db_path, sql).status == STATUS_RUNTIME_ERROR
        assert hashlib.sha256(tox_db_path.read_bytes()).hexdigest() == before

    def test_runaway_query_aborted_within_twice_timeout(self, tox_db_path):
        start = time.perf_counter()
        outcome = execute(tox_db_path, RUNAWAY, timeout_ms=100)
        elapsed = time.perf_counter() - start
        assert outcome.status == STATUS_TIMEOUT
        assert elapsed < 0.2, f"caller blocked {elapsed:.3f}s on a 100ms timeout"

    def test_trailing_semicolon_tolerated(self, tox_db_path):
        assert execute(tox_db_path, "SELECT 1;").status == STATUS_OK

    def test_determinism_on_unchanged_database(self, tox_db_path):
        first = execute(tox_db_path, "SELECT molecule_id, label FROM molecule")
        second = execute(tox_db_path, "SELECT molecule_id, label FROM molecule")
        assert first.fingerprint == second.fingerprint

    def test_missing_database_file(self, tmp_path):
        outcome = execute(tmp_path / "ghost.sqlite", "SELECT 1")
        assert outcome.status == STATUS_RUNTIME_ERROR


class TestFingerprint:
    def test_row_order_ignored(self):
        a = normalize_and_fingerprint([(1, "a"), (2, "b")])
        b = normalize_and_fingerprint([(2, "b"), (1, "a")])
        assert a == b

    def test_integral_real_collapses(self):
        assert normalize_and_fingerprint([(1.0,)]) == normalize_and_fingerprint([(1,)])

    def test_column_order_significant(self):
        assert normalize_and_fingerprint([("a", 1)]) != normalize_and_fingerprint([(1, "a")])

    def test_real_rounding_six_places(self):
        close = normalize_and_fingerprint([(0.1234564999,)])
        assert close == normalize_and_fingerprint([(0.123456,)])
        assert close != normalize_and_fingerprint([(0.123457,)])

    def test_negative_zero_collapses(self):
        assert normalize_and_fingerprint([(-0.0000001,)]) == normalize_and_fingerprint([(0.0,)])

    def test_null_is_its_own_atom(self):
        null = normalize_and_fingerprint([(None,)])
        assert null != normalize_and_fingerprint([(0,)])
        assert null != normalize_and_fingerprint([("",)])

    def test_duplicates_matter_unless_distinct(self):
        multiset = normalize_and_fingerprint([(1,), (1,)])
        single = normalize_and_fingerprint([(1,)])
        assert multiset != single
        assert normalize_and_fingerprint([(1,), (1,)], distinct=True) == normalize_and_fingerprint(
            [(1,)], distinct=True
        )

    def test_text_byte_exact(self):
        assert normalize_and_fingerprint([("a",)]) != normalize_and_fingerprint([("A",)])

    @settings(max_examples=50, deadline=None)
    @given(
        rows=st.lists(
            st.tuples(
                st.one_of(st.none(), st.integers(-5, 5), st.text(max_size=3)),
                st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False, width=32)),
            ),
            max_size=8,
        ),
        seed=st.integers(0, 1000),
    )
    def test_permutation_invariance(self, rows, seed):
        import random

        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        assert normalize_and_fingerprint(rows) == normalize_and_fingerprint(shuffled)


class TestEquivalenceSuite:
    def test_suite_is_large_enough(self):
        assert len(PAIRS) >= 20

    @pytest.mark.parametrize("db,sql_a,sql_b,equivalent", PAIRS)
    def test_pair(self, db, sql_a, sql_b, equivalent, tox_db_path, f1_db_path):
        path = tox_db_path if db == "tox" else f1_db_path
        a = execute(path, sql_a)
        b = execute(path, sql_b)
        assert a.status == STATUS_OK, a.error
        assert b.status == STATUS_OK, b.error
        assert (a.fingerprint == b.fingerprint) is equivalent


class TestTimeQuery:
    def test_single_repeat(self, tox_db_path):
        value = time_query(tox_db_path, "SELECT COUNT(*) FROM bond", repeats=1)
        assert value > 0

    def test_median_after_warmup_with_stub_clock(self, tox_db_path):
        # stub clock: each call advances 1000 units -> each execution "takes"
        # a fixed wall time; median over the post-warmup repeats
        ticks = iter(range(0, 10_000, 1000))
        value = time_query(
            tox_db_path, "SELECT 1", repeats=3, clock=lambda: next(ticks)
        )
        assert value > 0

    def test_failing_query_raises(self, tox_db_path):
        with pytest.raises(TimingError):
            time_query(tox_db_path, "SELEC 1", repeats=2)

    def test_zero_repeats_rejected(self, tox_db_path):
        with pytest.raises(ValueError):
            time_query(tox_db_path, "SELECT 1", repeats=0)


class TestOutcomeInvariants:
    def test_ok_requires_result_fields(self):
        with pytest.raises(ValueError):
            ExecutionOutcome(STATUS_OK)

    def test_error_must_not_carry_results(self):
        from mpsql.executor import ResultFingerprint

        with pytest.raises(ValueError):
            ExecutionOutcome(STATUS_TIMEOUT, fingerprint=ResultFingerprint("0" * 64))
