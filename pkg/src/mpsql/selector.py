"""Execution-guided candidate filtering and multiple-choice selection.

The pool is scored by result-agreement confidence, deduplicated to the
fastest query per distinct result, thresholded, and finally resolved by a
sampled multiple-choice vote.
"""

from __future__ import annotations

import re
import sqlite3
from collections import Counter
from dataclasses import dataclass, field

from .benchdata import BenchmarkExample, DbSchema
from .executor import STATUS_OK, ExecutionOutcome
from .fewshot import FewShotList
from .gateway import GatewayError, LlmGateway, LlmRequest
from .generator import CandidateQuery
from .linker import LinkedSchema
from .prompts import (
    description_section,
    examples_section,
    json_answer_section,
    question_section,
    sample_rows_section,
    schema_section,
)

FALLBACK_EMPTY_POOL = "empty_pool"
FALLBACK_NO_VOTE_MATCH = "no_vote_match"
FALLBACK_SINGLE_CANDIDATE = "single_candidate"
FALLBACK_BELOW_THRESHOLD = "below_threshold_fallback"

_INSTRUCTION = (
    "### When a DB schema, a question, and a knowledge evidence are given, and up to three "
    "SQLite queries expressing the question are given, please choose the most accurate SQL "
    "based on the Checklist."
)
_CHECKLIST = """### Checklist:
1. The SQL should accurately represent the question.
2. The SQL should accurately use the given knowledge evidence.
3. The SELECT clause should not include any additional columns that are not included in the question.
4. The order of columns in the SELECT clause must be the same as the order in the question.
5. Check if the operations are being performed correctly according to the column type."""
_VOTE_INSTRUCTION = """### Instruction:
- If the first SQL satisfies all the conditions of the checklist, please choose the first SQL. If not, move on to the next SQL.
- If there's no SQL that satisfies all the requirements on the checklist, just choose the first SQL.
- Provide a detailed step-by-step explanation following the order of the checklist when checking whether each SQL satisfies the checklist.
- """ + json_answer_section(
    "Your answer should strictly follow the following json format.",
    [
        ("reasoning", '""', "The reasoning steps for choosing the best SQL."),
        ("sql", '""', "The final chosen SQL."),
    ],
)

_WHITESPACE = re.compile(r"\s+")


@dataclass
class ScoredCandidate:
    query: CandidateQuery
    outcome: ExecutionOutcome
    confidence: float

    def __post_init__(self) -> None:
        if self.outcome.status != STATUS_OK:
            raise ValueError("scored candidates must have executed successfully")
        if not (0.0 < self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")


@dataclass
class SelectionResult:
    final_sql: str | None
    pool_sizes: tuple[int, int, int, int]  # raw, executable, after dedup, after threshold
    vote_tally: dict[str, int] = field(default_factory=dict)
    fallback_reason: str | None = None
    mcs_choices: int = 0  # candidates actually rendered in the vote prompt
    error: str | None = None


def score_pool(
    candidates: list[CandidateQuery], outcomes: list[ExecutionOutcome]
) -> list[ScoredCandidate]:
    """Confidence = share of the executable pool agreeing with each result.

    Syntax errors and timeouts are removed before N is counted.
    """
    if len(candidates) != len(outcomes):
        raise ValueError("candidates and outcomes must be parallel lists")
    survivors = [(c, o) for c, o in zip(candidates, outcomes) if o.status == STATUS_OK]
    if not survivors:
        return []
    total = len(survivors)
    group_sizes = Counter(o.fingerprint.digest for _, o in survivors)
    return [
        ScoredCandidate(query=c, outcome=o, confidence=group_sizes[o.fingerprint.digest] / total)
        for c, o in survivors
    ]


def _provenance(candidate: ScoredCandidate) -> tuple[int, int]:
    return (candidate.query.prompt_index, candidate.query.sample_index)


def dedup_fastest(pool: list[ScoredCandidate]) -> list[ScoredCandidate]:
    """One candidate per distinct result: minimal execution time wins,
    exact ties broken by (prompt_index, sample_index)."""
    best: dict[str, ScoredCandidate] = {}
    for candidate in pool:
        digest = candidate.outcome.fingerprint.digest
        incumbent = best.get(digest)
        if incumbent is None or (candidate.outcome.exec_time_ms, *_provenance(candidate)) < (
            incumbent.outcome.exec_time_ms,
            *_provenance(incumbent),
        ):
            best[digest] = candidate
    return sorted(best.values(), key=_provenance)


def filter_threshold(deduped: list[ScoredCandidate], threshold: float) -> list[ScoredCandidate]:
    """Keep confidence >= threshold; an emptied pool keeps its single
    highest-confidence candidate instead."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    kept = [c for c in deduped if c.confidence >= threshold]
    if not kept and deduped:
        kept = [max(deduped, key=lambda c: (c.confidence, tuple(-p for p in _provenance(c))))]
    return kept


def threshold_fallback_applied(deduped: list[ScoredCandidate], threshold: float) -> bool:
    return bool(deduped) and all(c.confidence < threshold for c in deduped)


def rank_by_confidence(pool: list[ScoredCandidate]) -> list[ScoredCandidate]:
    return sorted(pool, key=lambda c: (-c.confidence, *_provenance(c)))


def normalize_sql_for_vote(sql: str) -> str:
    return _WHITESPACE.sub(" ", sql).strip().rstrip(";").strip().lower()


def build_mcs_prompt(
    candidates: list[ScoredCandidate],
    linked: LinkedSchema,
    schema: DbSchema,
    db: sqlite3.Connection,
    fewshot: FewShotList,
    example: BenchmarkExample,
    sample_rows: int = 3,
) -> str:
    """Numbered multiple-choice prompt, candidates in descending confidence."""
    if len(candidates) < 2:
        raise ValueError("multiple-choice selection needs at least 2 candidates")
    ordered = rank_by_confidence(candidates)
    numbered = "\n".join(f"{i + 1}. {c.query.sql}" for i, c in enumerate(ordered))
    sections = [_INSTRUCTION]
    if fewshot.items:
        sections.append(examples_section(fewshot.items))
    sections.extend(
        [
            schema_section(schema, linked.tables),
            description_section(schema, linked.tables),
            sample_rows_section(db, schema, linked.tables, sample_rows),
            question_section(example.question, example.evidence),
            f"### Candidate SQLs:\n{numbered}",
            _CHECKLIST,
            _VOTE_INSTRUCTION,
            "### Your Answer:",
        ]
    )
    return "\n\n".join(sections)


def select_final(
    filtered: list[ScoredCandidate],
    example: BenchmarkExample,
    linked: LinkedSchema | None,
    schema: DbSchema | None,
    db: sqlite3.Connection | None,
    fewshot: FewShotList | None,
    gateway: LlmGateway | None,
    config,
    pool_sizes: tuple[int, int, int, int],
    threshold_fell_back: bool = False,
) -> SelectionResult:
    """Majority vote over n multiple-choice samples.

    Votes are matched to candidates by whitespace-collapsed, case-normalized
    equality; unmatched votes are discarded. Vote ties break to the higher
    confidence, then candidate order. With nothing to choose between (zero
    or one candidate) no LLM call is made.
    """
    if not filtered:
        return SelectionResult(None, pool_sizes, fallback_reason=FALLBACK_EMPTY_POOL)
    base_reason = FALLBACK_BELOW_THRESHOLD if threshold_fell_back else None
    if len(filtered) == 1:
        return SelectionResult(
            filtered[0].query.sql,
            pool_sizes,
            fallback_reason=base_reason or FALLBACK_SINGLE_CANDIDATE,
        )

    ordered = rank_by_confidence(filtered)
    choices = ordered[: config.max_choices]
    prompt = build_mcs_prompt(choices, linked, schema, db, fewshot, example, config.sample_rows)
    try:
        completions = gateway.complete(
            LlmRequest(
                prompt=prompt,
                n=config.n,
                temperature=config.temperature,
                max_output_tokens=config.max_output_tokens,
                tag="mcs",
                meta={"example_id": example.example_id},
            )
        )
    except GatewayError as exc:
        return SelectionResult(
            choices[0].query.sql,
            pool_sizes,
            fallback_reason=FALLBACK_NO_VOTE_MATCH,
            mcs_choices=len(choices),
            error=str(exc),
        )

    normalized = {normalize_sql_for_vote(c.query.sql): i for i, c in enumerate(choices)}
    votes: Counter[int] = Counter()
    for completion in completions:
        completion.ensure_parsed(["sql"])
        if completion.parsed is None:
            continue
        voted = completion.parsed.get("sql")
        if not isinstance(voted, str):
            continue
        choice_index = normalized.get(normalize_sql_for_vote(voted))
        if choice_index is not None:
            votes[choice_index] += 1

    tally = {choices[i].query.sql: count for i, count in sorted(votes.items())}
    if not votes:
        return SelectionResult(
            choices[0].query.sql,
            pool_sizes,
            vote_tally=tally,
            fallback_reason=FALLBACK_NO_VOTE_MATCH,
            mcs_choices=len(choices),
        )
    winner_index = min(
        votes,
        key=lambda i: (-votes[i], -choices[i].confidence, i),
    )
    return SelectionResult(
        choices[winner_index].query.sql,
        pool_sizes,
        vote_tally=tally,
        fallback_reason=base_reason,
        mcs_choices=len(choices),
    )


def run_selection(
    candidates: list[CandidateQuery],
    outcomes: list[ExecutionOutcome],
    example: BenchmarkExample,
    linked: LinkedSchema | None,
    schema: DbSchema | None,
    db: sqlite3.Connection | None,
    fewshot: FewShotList | None,
    gateway: LlmGateway | None,
    config,
) -> tuple[SelectionResult, list[ScoredCandidate]]:
    """Full selection pass: score, dedup, threshold, vote."""
    scored = score_pool(candidates, outcomes)
    deduped = dedup_fastest(scored)
    filtered = filter_threshold(deduped, config.threshold)
    fell_back = threshold_fallback_applied(deduped, config.threshold)
    pool_sizes = (len(candidates), len(scored), len(deduped), len(filtered))
    result = select_final(
        filtered, example, linked, schema, db, fewshot, gateway, config, pool_sizes, fell_back
    )
    return result, deduped
