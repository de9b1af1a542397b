"""Execution accuracy, valid efficiency score, and schema-linking recall."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .benchdata import BenchmarkExample, DbSchema, extract_gold_identifiers
from .executor import STATUS_OK, TimingError, execute, time_query
from .linker import LinkedSchema

DIFFICULTY_ORDER = ("simple", "moderate", "challenging", "easy", "medium", "hard", "extra_hard", "unknown")

# timer(db_path, sql) -> milliseconds; swap in a stub for deterministic reports.
Timer = Callable[[Path, str], float]


@dataclass
class ExampleVerdict:
    example_id: str
    db_id: str
    difficulty: str
    predicted_sql: str | None
    match: bool
    reward: float
    unanswered: bool
    gold_error: str | None = None
    prediction_error: str | None = None
    timing_warning: str | None = None


@dataclass
class EvalReport:
    ex_overall: float
    ex_by_difficulty: dict[str, float]
    ves: float
    linking_table_recall: float | None
    linking_column_recall: float | None
    counts: dict[str, int]
    unanswered: int
    gold_errors: list[str] = field(default_factory=list)
    per_example: list[ExampleVerdict] = field(default_factory=list)


def _percentage(hits: int, total: int) -> float:
    return 100.0 * hits / total if total else 0.0


def _stub_timer(_db_path: Path, _sql: str) -> float:
    return 1.0


def make_timer(config) -> Timer:
    if getattr(config, "timing", "real") == "stub":
        return _stub_timer
    repeats = getattr(config, "ves_repeats", 3)
    timeout = getattr(config, "exec_timeout_ms", 180_000)

    def _real(db_path: Path, sql: str) -> float:
        return time_query(db_path, sql, repeats, timeout_ms=timeout)

    return _real


def score_predictions(
    predictions: dict[str, str | None],
    examples: list[BenchmarkExample],
    db_paths: dict[str, Path],
    config,
    timer: Timer | None = None,
) -> list[ExampleVerdict]:
    """Execute gold and predicted SQL per example, producing verdicts.

    A match requires both executions to succeed with equal fingerprints.
    Gold execution failure is a data problem: the example is flagged and
    later excluded from every denominator. VES rewards are sqrt(gold time /
    predicted time) on matches, zero otherwise; a timing failure on a
    matched pair degrades to reward 1.0 with a warning.
    """
    timer = timer or make_timer(config)
    timeout = getattr(config, "exec_timeout_ms", 180_000)
    distinct = getattr(config, "distinct_rows", False)
    verdicts: list[ExampleVerdict] = []
    for example in examples:
        db_path = db_paths[example.db_id]
        predicted = predictions.get(example.example_id)
        gold_outcome = execute(db_path, example.gold_sql, timeout, distinct_rows=distinct)
        if gold_outcome.status != STATUS_OK:
            verdicts.append(
                ExampleVerdict(
                    example.example_id,
                    example.db_id,
                    example.difficulty,
                    predicted,
                    match=False,
                    reward=0.0,
                    unanswered=predicted is None,
                    gold_error=f"{gold_outcome.status}: {gold_outcome.error}",
                )
            )
            continue
        if predicted is None:
            verdicts.append(
                ExampleVerdict(
                    example.example_id,
                    example.db_id,
                    example.difficulty,
                    None,
                    match=False,
                    reward=0.0,
                    unanswered=True,
                )
            )
            continue
        pred_outcome = execute(db_path, predicted, timeout, distinct_rows=distinct)
        match = (
            pred_outcome.status == STATUS_OK
            and pred_outcome.fingerprint == gold_outcome.fingerprint
        )
        reward = 0.0
        timing_warning = None
        if match:
            try:
                gold_ms = timer(db_path, example.gold_sql)
                pred_ms = timer(db_path, predicted)
                reward = math.sqrt(gold_ms / pred_ms) if pred_ms > 0 else 1.0
            except TimingError as exc:
                reward = 1.0
                timing_warning = str(exc)
        verdicts.append(
            ExampleVerdict(
                example.example_id,
                example.db_id,
                example.difficulty,
                predicted,
                match=match,
                reward=reward,
                unanswered=False,
                prediction_error=(
                    None
                    if pred_outcome.status == STATUS_OK
                    else f"{pred_outcome.status}: {pred_outcome.error}"
                ),
                timing_warning=timing_warning,
            )
        )
    return verdicts


def _valid(verdicts: list[ExampleVerdict]) -> list[ExampleVerdict]:
    return [v for v in verdicts if v.gold_error is None]


def exec_accuracy(
    predictions: dict[str, str | None],
    examples: list[BenchmarkExample],
    db_paths: dict[str, Path],
    config,
) -> tuple[float, dict[str, float]]:
    """(overall EX, per-difficulty EX) as percentages."""
    verdicts = _valid(score_predictions(predictions, examples, db_paths, config, timer=_stub_timer))
    overall = _percentage(sum(v.match for v in verdicts), len(verdicts))
    by_difficulty: dict[str, float] = {}
    for difficulty in DIFFICULTY_ORDER:
        bucket = [v for v in verdicts if v.difficulty == difficulty]
        if bucket:
            by_difficulty[difficulty] = _percentage(sum(v.match for v in bucket), len(bucket))
    return overall, by_difficulty


def valid_efficiency_score(
    predictions: dict[str, str | None],
    examples: list[BenchmarkExample],
    db_paths: dict[str, Path],
    config,
    timer: Timer | None = None,
) -> float:
    """100 x mean per-example reward; mismatches contribute zero."""
    verdicts = _valid(score_predictions(predictions, examples, db_paths, config, timer=timer))
    if not verdicts:
        return 0.0
    return 100.0 * sum(v.reward for v in verdicts) / len(verdicts)


def linking_recall(
    linked_schemas: dict[str, LinkedSchema],
    examples: list[BenchmarkExample],
    schemas: dict[str, DbSchema],
) -> tuple[float, float]:
    """Per-example hit = gold identifiers are a subset of the linked sets.

    An empty extraction counts as a (vacuous) hit. Examples with no linked
    schema count as misses.
    """
    table_hits = column_hits = 0
    for example in examples:
        gold_tables, gold_columns = extract_gold_identifiers(
            example.gold_sql, schemas[example.db_id]
        )
        linked = linked_schemas.get(example.example_id)
        linked_tables = {t.lower() for t in linked.table_names()} if linked else set()
        linked_columns = {c.lower() for c in linked.column_names()} if linked else set()
        if {t.lower() for t in gold_tables} <= linked_tables:
            table_hits += 1
        if {c.lower() for c in gold_columns} <= linked_columns:
            column_hits += 1
    total = len(examples)
    return _percentage(table_hits, total), _percentage(column_hits, total)


def build_report(
    predictions: dict[str, str | None],
    examples: list[BenchmarkExample],
    db_paths: dict[str, Path],
    config,
    linked_schemas: dict[str, LinkedSchema] | None = None,
    schemas: dict[str, DbSchema] | None = None,
    timer: Timer | None = None,
) -> EvalReport:
    """Single evaluation pass shared by EX, VES, and recall reporting."""
    verdicts = score_predictions(predictions, examples, db_paths, config, timer=timer)
    valid = _valid(verdicts)
    gold_errors = [v.example_id for v in verdicts if v.gold_error is not None]

    by_difficulty: dict[str, float] = {}
    counts: dict[str, int] = {}
    for difficulty in DIFFICULTY_ORDER:
        bucket = [v for v in valid if v.difficulty == difficulty]
        if bucket:
            counts[difficulty] = len(bucket)
            by_difficulty[difficulty] = _percentage(sum(v.match for v in bucket), len(bucket))

    table_recall = column_recall = None
    if linked_schemas is not None and schemas is not None:
        valid_ids = {v.example_id for v in valid}
        table_recall, column_recall = linking_recall(
            linked_schemas, [e for e in examples if e.example_id in valid_ids], schemas
        )

    return EvalReport(
        ex_overall=_percentage(sum(v.match for v in valid), len(valid)),
        ex_by_difficulty=by_difficulty,
        ves=100.0 * sum(v.reward for v in valid) / len(valid) if valid else 0.0,
        linking_table_recall=table_recall,
        linking_column_recall=column_recall,
        counts=counts,
        unanswered=sum(v.unanswered for v in verdicts),
        gold_errors=gold_errors,
        per_example=verdicts,
    )


@dataclass
class AblationRow:
    name: str
    ex_overall: float | None
    error: str | None = None


def ablation_run(
    base_config,
    deltas: list[tuple[str, dict]],
    split: str,
    workdir: Path,
) -> list[AblationRow]:
    """EX per named configuration override, each as a full pipeline run.

    Rows whose replay fixtures are incomplete report an error but do not
    stop the remaining configurations.
    """
    from dataclasses import replace

    from .gateway import GatewayError
    from .pipeline import init_run, run_all

    rows: list[AblationRow] = []
    for name, overrides in deltas:
        config = replace(base_config, **overrides)
        run_dir = Path(workdir) / f"ablation-{name}"
        try:
            ctx = init_run(config, split, run_dir)
            report = run_all(ctx)
            rows.append(AblationRow(name, report.ex_overall))
        except GatewayError as exc:
            rows.append(AblationRow(name, None, error=str(exc)))
    return rows


def render_ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(r.name) for r in rows) if rows else 4
    lines = [f"{'configuration'.ljust(width)}  EX"]
    for row in rows:
        value = f"{row.ex_overall:.1f}" if row.ex_overall is not None else f"error: {row.error}"
        lines.append(f"{row.name.ljust(width)}  {value}")
    return "\n".join(lines)
