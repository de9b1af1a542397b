"""Read-only SQLite execution with timeouts and result fingerprinting.

Execution results are compared through a digest of the normalized row
multiset, which realizes the equality test the selection and accuracy
metrics are built on.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

NORMALIZATION_VERSION = 1

STATUS_OK = "ok"
STATUS_SYNTAX_ERROR = "syntax_error"
STATUS_RUNTIME_ERROR = "runtime_error"
STATUS_TIMEOUT = "timeout"

# Recognized write/DDL statements are rejected before execution; anything
# else (including typos) goes to sqlite, which classifies it, while the
# read-only connection mode backstops mutation attempts.
_WRITE_KEYWORDS = frozenset(
    "insert update delete replace drop create alter pragma attach detach "
    "vacuum begin commit rollback reindex analyze savepoint release".split()
)
_PROGRESS_OPCODES = 2000


class TimingError(Exception):
    """A timing repeat failed; no measurement can be reported."""


@dataclass(frozen=True)
class ResultFingerprint:
    digest: str  # sha256 hex of the normalized result
    normalization_version: int = NORMALIZATION_VERSION


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str
    fingerprint: ResultFingerprint | None = None
    row_count: int | None = None
    exec_time_ms: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        ok_fields = (self.fingerprint, self.row_count, self.exec_time_ms)
        if self.status == STATUS_OK:
            if any(v is None for v in ok_fields):
                raise ValueError("ok outcome requires fingerprint, row_count, exec_time_ms")
        elif any(v is not None for v in ok_fields):
            raise ValueError(f"{self.status} outcome must not carry result fields")


def _canon_cell(value: object) -> list:
    """Canonical, type-tagged cell representation.

    Integral reals collapse to integers; other reals round to 6 decimals;
    text stays byte-exact; NULL is its own atom.
    """
    if value is None:
        return ["n"]
    if isinstance(value, bool):  # sqlite never yields bool, but be safe
        return ["i", int(value)]
    if isinstance(value, int):
        return ["i", value]
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            return ["f", repr(value)]
        rounded = round(value, 6)
        if rounded.is_integer():
            return ["i", int(rounded)]
        return ["f", format(rounded, ".6f")]
    if isinstance(value, bytes):
        return ["b", value.hex()]
    return ["s", str(value)]


def normalize_and_fingerprint(rows: list[tuple], *, distinct: bool = False) -> ResultFingerprint:
    """Digest of the normalized row multiset.

    Row order is ignored (rows are sorted after canonicalization); column
    order within a row is significant. `distinct` switches to set semantics.
    """
    serialized = sorted(
        json.dumps([_canon_cell(cell) for cell in row], ensure_ascii=False) for row in rows
    )
    if distinct:
        deduped = []
        for line in serialized:
            if not deduped or deduped[-1] != line:
                deduped.append(line)
        serialized = deduped
    body = "\n".join(serialized)
    payload = f"v{NORMALIZATION_VERSION}|{len(serialized)}\n{body}"
    return ResultFingerprint(hashlib.sha256(payload.encode("utf-8")).hexdigest())


def _classify_error(exc: sqlite3.Error, timed_out: bool) -> tuple[str, str]:
    message = str(exc)
    if timed_out and "interrupt" in message.lower():
        return STATUS_TIMEOUT, message
    if "syntax error" in message.lower():
        return STATUS_SYNTAX_ERROR, message
    return STATUS_RUNTIME_ERROR, message


def execute(
    db_path: Path | str,
    sql: str,
    timeout_ms: int = 180_000,
    *,
    distinct_rows: bool = False,
    clock: Callable[[], float] = time.perf_counter,
) -> ExecutionOutcome:
    """Run one SELECT-producing statement read-only and fingerprint its rows.

    Failures are reported through the outcome status, never raised. A query
    exceeding timeout_ms is interrupted via a progress handler, so the
    caller is never blocked much past the deadline.
    """
    stripped = sql.strip().rstrip(";").strip()
    if not stripped or stripped.split(None, 1)[0].lower() in _WRITE_KEYWORDS:
        return ExecutionOutcome(STATUS_RUNTIME_ERROR, error="only SELECT statements are executed")
    try:
        conn = sqlite3.connect(f"file:{Path(db_path)}?mode=ro", uri=True)
    except sqlite3.Error as exc:
        return ExecutionOutcome(STATUS_RUNTIME_ERROR, error=f"cannot open database: {exc}")

    start = clock()
    deadline = start + timeout_ms / 1000.0
    timed_out = False

    def _progress() -> int:
        nonlocal timed_out
        if clock() > deadline:
            timed_out = True
            return 1
        return 0

    conn.set_progress_handler(_progress, _PROGRESS_OPCODES)
    try:
        cursor = conn.execute(stripped)
        rows = cursor.fetchall()
        elapsed_ms = (clock() - start) * 1000.0
    except sqlite3.Error as exc:
        status, message = _classify_error(exc, timed_out)
        return ExecutionOutcome(status, error=message)
    finally:
        conn.close()
    return ExecutionOutcome(
        STATUS_OK,
        fingerprint=normalize_and_fingerprint(rows, distinct=distinct_rows),
        row_count=len(rows),
        exec_time_ms=elapsed_ms,
    )


def time_query(
    db_path: Path | str,
    sql: str,
    repeats: int = 3,
    *,
    timeout_ms: int = 180_000,
    clock: Callable[[], float] = time.perf_counter,
) -> float:
    """Median wall-clock milliseconds over `repeats` executions.

    The first run is discarded as cache warm-up when repeats >= 2. Any
    failing repeat raises TimingError.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    samples: list[float] = []
    for _ in range(repeats):
        outcome = execute(db_path, sql, timeout_ms, clock=clock)
        if outcome.status != STATUS_OK:
            raise TimingError(f"query failed while timing ({outcome.status}): {outcome.error}")
        samples.append(outcome.exec_time_ms)
    if repeats >= 2:
        samples = samples[1:]
    return statistics.median(samples)
