"""Two-stage schema linking: table selection then column selection.

Each stage issues several prompts with shuffled schema order, samples many
answers per prompt, and unions everything — omissions are fatal downstream
while extra tables or columns are merely noise, so recall wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .benchdata import BenchmarkExample, DbSchema
from .gateway import LlmGateway, LlmRequest
from .prompts import json_answer_section, question_section, schema_section

TABLE_STAGE = "table"
COLUMN_STAGE = "column"

_TABLE_INSTRUCTION = (
    "### Given a database schema, question, and knowledge evidence, extract a list of "
    "tables that should be referenced to convert the question into SQL."
)
_COLUMN_INSTRUCTION = (
    "### Given a database schema, question, and knowledge evidence, extract a list of "
    "columns that should be referenced to convert the question into SQL."
)
_TABLE_ANSWER = json_answer_section(
    "You need to not only select the required tables, but also explain in detail why each "
    "table is needed.\nYour answer should strictly follow the following json format.",
    [
        ("reasoning", '""', "The reason for choosing each table."),
        ("tables", "[]", "List of selected tables."),
    ],
)
_COLUMN_ANSWER = json_answer_section(
    "You need to not only select the required columns, but also explain in detail why each "
    "column is needed.\nYour answer should strictly follow the following json format.",
    [
        ("reasoning", '""', "The reason for choosing each column."),
        ("columns", '["table_name_i.column_name_j", ...]', "List of selected columns"),
    ],
)


class LinkingError(Exception):
    """No sample in any prompt produced a parseable answer."""


@dataclass
class LinkedSchema:
    """Pruned view of a DbSchema: table name -> retained column names."""

    db_id: str
    tables: dict[str, list[str]]

    def validate(self, schema: DbSchema) -> None:
        if schema.db_id != self.db_id:
            raise ValueError(f"linked schema for {self.db_id} checked against {schema.db_id}")
        for table, columns in self.tables.items():
            table_def = schema.table(table)
            if table_def is None:
                raise ValueError(f"linked table {table!r} not in schema")
            if not columns:
                raise ValueError(f"linked table {table!r} has no columns")
            for column in columns:
                if table_def.column(column) is None:
                    raise ValueError(f"linked column {table}.{column} not in schema")

    def table_names(self) -> set[str]:
        return set(self.tables)

    def column_names(self) -> set[str]:
        return {f"{t}.{c}" for t, cols in self.tables.items() for c in cols}


@dataclass
class LinkingTrace:
    stage: str
    prompt_index: int
    answers: list[list[str]] = field(default_factory=list)  # canonical names per response
    dropped_names: list[str] = field(default_factory=list)  # hallucinated identifiers


def derive_permutation_seed(seed: int, example_id: str, stage: str, prompt_index: int) -> int:
    """Stable per-(example, stage, prompt) seed so runs reproduce exactly."""
    payload = f"{seed}\x1f{example_id}\x1f{stage}\x1f{prompt_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def build_table_prompt(
    schema: DbSchema,
    question: str,
    evidence: str | None,
    permutation_seed: int,
) -> str:
    return "\n\n".join(
        [
            _TABLE_INSTRUCTION,
            schema_section(schema, order_seed=permutation_seed),
            question_section(question, evidence),
            _TABLE_ANSWER,
            "### Your Answer:",
        ]
    )


def build_column_prompt(
    schema: DbSchema,
    linked_tables: set[str],
    question: str,
    evidence: str | None,
    permutation_seed: int,
) -> str:
    if not linked_tables:
        raise ValueError("linked_tables must be nonempty")
    full_columns = {
        t.name: t.column_names() for t in schema.tables if t.name.lower() in {n.lower() for n in linked_tables}
    }
    return "\n\n".join(
        [
            _COLUMN_INSTRUCTION,
            schema_section(schema, full_columns, order_seed=permutation_seed, shuffle_columns=True),
            question_section(question, evidence),
            _COLUMN_ANSWER,
            "### Your Answer:",
        ]
    )


def _clean_name(raw: object) -> str | None:
    if not isinstance(raw, str):
        return None
    return raw.strip().strip("`\"'[]").strip() or None


def _request_answers(
    gateway: LlmGateway,
    prompt: str,
    n: int,
    temperature: float,
    tag: str,
    meta: dict,
    answer_field: str,
) -> tuple[list[list[object]], int]:
    """All parsed answer lists for one prompt, plus the unparseable-sample count."""
    completions = gateway.complete(
        LlmRequest(prompt=prompt, n=n, temperature=temperature, tag=tag, meta=meta)
    )
    answers: list[list[object]] = []
    drops = 0
    for completion in completions:
        completion.ensure_parsed([answer_field])
        if completion.parsed is None or not isinstance(completion.parsed.get(answer_field), list):
            drops += 1
            continue
        answers.append(completion.parsed[answer_field])
    return answers, drops


def link_tables(
    gateway: LlmGateway,
    example: BenchmarkExample,
    schema: DbSchema,
    config,
) -> tuple[set[str], list[LinkingTrace], dict]:
    """Union of table lists over p_t prompts x n samples.

    Hallucinated names are dropped and recorded; an empty union falls back
    to the full table list. Raises LinkingError only when not a single
    sample parsed.
    """
    union: set[str] = set()
    traces: list[LinkingTrace] = []
    parse_drops = 0
    parsed_any = False
    for prompt_index in range(config.p_t):
        seed = derive_permutation_seed(config.seed, example.example_id, TABLE_STAGE, prompt_index)
        prompt = build_table_prompt(schema, example.question, example.evidence, seed)
        trace = LinkingTrace(TABLE_STAGE, prompt_index)
        answers, drops = _request_answers(
            gateway,
            prompt,
            config.n,
            config.temperature,
            "table_linking",
            {"example_id": example.example_id, "prompt_index": str(prompt_index)},
            "tables",
        )
        parse_drops += drops
        for answer in answers:
            parsed_any = True
            canonical: list[str] = []
            for raw in answer:
                name = _clean_name(raw)
                resolved = schema.canonical_table(name) if name else None
                if resolved is None:
                    trace.dropped_names.append(str(raw))
                else:
                    canonical.append(resolved)
            trace.answers.append(canonical)
            union.update(canonical)
        traces.append(trace)
    if not parsed_any:
        raise LinkingError(f"example {example.example_id}: no table-linking sample parsed")
    counters = {"parse_drops": parse_drops, "fallback_all_tables": False}
    if not union:
        union = {t.name for t in schema.tables}
        counters["fallback_all_tables"] = True
    return union, traces, counters


def link_columns(
    gateway: LlmGateway,
    example: BenchmarkExample,
    schema: DbSchema,
    linked_tables: set[str],
    config,
) -> tuple[LinkedSchema, list[LinkingTrace], dict]:
    """Union of `[table].[column]` answers over p_c prompts x n samples.

    Foreign-key columns joining two linked tables are force-included; a
    linked table left without columns gets all of them.
    """
    canonical_tables = {schema.canonical_table(t) for t in linked_tables}
    canonical_tables.discard(None)
    if not canonical_tables:
        raise ValueError("linked_tables resolved to nothing in the schema")

    selected: dict[str, set[str]] = {t: set() for t in canonical_tables}
    traces: list[LinkingTrace] = []
    parse_drops = 0
    parsed_any = False
    for prompt_index in range(config.p_c):
        seed = derive_permutation_seed(config.seed, example.example_id, COLUMN_STAGE, prompt_index)
        prompt = build_column_prompt(schema, canonical_tables, example.question, example.evidence, seed)
        trace = LinkingTrace(COLUMN_STAGE, prompt_index)
        answers, drops = _request_answers(
            gateway,
            prompt,
            config.n,
            config.temperature,
            "column_linking",
            {"example_id": example.example_id, "prompt_index": str(prompt_index)},
            "columns",
        )
        parse_drops += drops
        for answer in answers:
            parsed_any = True
            canonical: list[str] = []
            for raw in answer:
                name = _clean_name(raw)
                table_part, _, column_part = name.partition(".") if name else ("", "", "")
                table_part = table_part.strip().strip("`\"'[]")
                column_part = column_part.strip().strip("`\"'[]")
                resolved_table = schema.canonical_table(table_part) if table_part else None
                resolved = (
                    schema.canonical_column(resolved_table, column_part)
                    if resolved_table in selected and column_part
                    else None
                )
                if resolved is None:
                    trace.dropped_names.append(str(raw))
                else:
                    canonical.append(resolved)
                    table_name, _, column_name = resolved.partition(".")
                    selected[table_name].add(column_name)
            trace.answers.append(canonical)
        traces.append(trace)
    if not parsed_any:
        raise LinkingError(f"example {example.example_id}: no column-linking sample parsed")

    fk_forced: list[str] = []
    lowered = {t.lower() for t in canonical_tables}
    for left, right in schema.foreign_keys:
        lt, _, lc = left.partition(".")
        rt, _, rc = right.partition(".")
        if lt.lower() in lowered and rt.lower() in lowered:
            for endpoint_table, endpoint_column in ((lt, lc), (rt, rc)):
                canonical = schema.canonical_column(endpoint_table, endpoint_column)
                table_name, _, column_name = canonical.partition(".")
                if column_name not in selected[table_name]:
                    selected[table_name].add(column_name)
                    fk_forced.append(canonical)

    table_fallbacks: list[str] = []
    for table_name, columns in selected.items():
        if not columns:
            columns.update(schema.table(table_name).column_names())
            table_fallbacks.append(table_name)

    ordered: dict[str, list[str]] = {}
    for table in schema.tables:  # schema declaration order keeps prompts stable
        if table.name in selected:
            ordered[table.name] = [c for c in table.column_names() if c in selected[table.name]]
    linked = LinkedSchema(db_id=schema.db_id, tables=ordered)
    linked.validate(schema)
    counters = {
        "parse_drops": parse_drops,
        "fk_forced": sorted(fk_forced),
        "table_fallbacks": sorted(table_fallbacks),
    }
    return linked, traces, counters
