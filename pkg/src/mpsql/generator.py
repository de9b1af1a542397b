"""Candidate SQL generation from the p_q few-shot prompt variants."""

from __future__ import annotations

import re
import sqlite3
from dataclasses import dataclass

from .benchdata import BenchmarkExample, DbSchema
from .fewshot import FewShotList
from .gateway import JsonAnswerError, LlmGateway, LlmRequest, parse_json_answer
from .linker import LinkedSchema
from .prompts import (
    description_section,
    examples_section,
    json_answer_section,
    question_section,
    sample_rows_section,
    schema_section,
)

_INSTRUCTION = (
    "### Given a database schema, question, and knowledge evidence, generate the correct "
    "sqlite SQL query for the question."
)
_ANSWER = json_answer_section(
    "You need to not only create the SQL, but also provide the detailed reasoning steps "
    "required to create the SQL. Your answer should strictly follow the following json format:",
    [
        ("reasoning", '""', "The reasoning steps for generating SQL."),
        ("sql", '""', "The final generated SQL."),
    ],
)

_FENCED_BLOCK = re.compile(r"```(?:sql)?\s*\n?(.*?)```", re.DOTALL)


class GenerationError(Exception):
    """Every sample across every prompt was dropped."""


@dataclass(frozen=True)
class CandidateQuery:
    sql: str
    prompt_index: int
    sample_index: int
    reasoning: str = ""

    def __post_init__(self) -> None:
        if not self.sql.strip():
            raise ValueError("candidate sql must be nonempty")


def split_statements(sql: str) -> list[str]:
    """Split on semicolons outside string literals."""
    parts: list[str] = []
    current: list[str] = []
    quote: str | None = None
    for ch in sql:
        if quote:
            current.append(ch)
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            current.append(ch)
        elif ch == ";":
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return [p.strip() for p in parts if p.strip()]


def build_generation_prompt(
    linked: LinkedSchema,
    schema: DbSchema,
    db: sqlite3.Connection,
    fewshot: FewShotList,
    example: BenchmarkExample,
    sample_rows: int = 3,
) -> str:
    sections = [_INSTRUCTION]
    if fewshot.items:
        sections.append(examples_section(fewshot.items))
    sections.extend(
        [
            schema_section(schema, linked.tables),
            description_section(schema, linked.tables),
            sample_rows_section(db, schema, linked.tables, sample_rows),
            question_section(example.question, example.evidence),
            _ANSWER,
            "### Your Answer:",
        ]
    )
    return "\n\n".join(sections)


def _extract_sql(raw_text: str) -> tuple[str | None, str, str | None]:
    """(sql, reasoning, drop_reason); the fenced-block fallback salvages
    near-miss completions whose JSON did not parse."""
    try:
        parsed = parse_json_answer(raw_text, ["sql"])
        sql = parsed.get("sql")
        if not isinstance(sql, str) or not sql.strip():
            return None, "", "empty"
        return sql, str(parsed.get("reasoning", "")), None
    except JsonAnswerError:
        blocks = _FENCED_BLOCK.findall(raw_text)
        if len(blocks) == 1 and blocks[0].strip():
            return blocks[0], "", "salvaged"
        return None, "", "parse"


def generate_candidates(
    gateway: LlmGateway,
    example: BenchmarkExample,
    linked: LinkedSchema,
    schema: DbSchema,
    db: sqlite3.Connection,
    variants: list[FewShotList],
    config,
) -> tuple[list[CandidateQuery], dict, list[str]]:
    """One request per prompt variant, n samples each.

    Returns accepted candidates in canonical (prompt_index, sample_index)
    order, per-reason drop counters, and the archived prompt texts.
    """
    candidates: list[CandidateQuery] = []
    counters = {"parse_drops": 0, "empty_drops": 0, "multi_statement_drops": 0, "salvaged": 0}
    prompts: list[str] = []
    for variant in variants:
        prompt = build_generation_prompt(linked, schema, db, variant, example, config.sample_rows)
        prompts.append(prompt)
        completions = gateway.complete(
            LlmRequest(
                prompt=prompt,
                n=config.n,
                temperature=config.temperature,
                max_output_tokens=config.max_output_tokens,
                tag="sql_generation",
                meta={"example_id": example.example_id, "prompt_index": str(variant.variant_index)},
            )
        )
        for sample_index, completion in enumerate(completions):
            sql, reasoning, drop = _extract_sql(completion.raw_text)
            if drop == "parse":
                counters["parse_drops"] += 1
                continue
            if drop == "empty":
                counters["empty_drops"] += 1
                continue
            if drop == "salvaged":
                counters["salvaged"] += 1
            statements = split_statements(sql)
            if not statements:
                counters["empty_drops"] += 1
                continue
            if len(statements) > 1:
                counters["multi_statement_drops"] += 1
                continue
            candidates.append(
                CandidateQuery(
                    sql=statements[0],
                    prompt_index=variant.variant_index,
                    sample_index=sample_index,
                    reasoning=reasoning,
                )
            )
    if not candidates:
        raise GenerationError(f"example {example.example_id}: every generated sample was dropped")
    candidates.sort(key=lambda c: (c.prompt_index, c.sample_index))
    return candidates, counters, prompts
