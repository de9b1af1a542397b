"""Shared prompt sections used by the linking, generation, and selection prompts."""

from __future__ import annotations

import sqlite3

from .benchdata import DbSchema, render_schema, sample_table_csv

SCHEMA_HEADING = "### SQLite SQL tables, with their properties:"
DESCRIPTION_HEADING = "### The type and description of each column:"
SAMPLE_ROWS_HEADING = "### Sample rows of each table in csv format:"
QUESTION_PREFIX = "### Question:"
EVIDENCE_PREFIX = "### Knowledge Evidence:"
ANSWER_CUE = "### Your Answer:"


def schema_section(
    schema: DbSchema,
    linked: dict | None = None,
    order_seed: int | None = None,
    shuffle_columns: bool = False,
) -> str:
    body = render_schema(schema, linked, order_seed, shuffle_columns)
    return f"{SCHEMA_HEADING}\n{body}"


def question_section(question: str, evidence: str | None) -> str:
    lines = [f"{QUESTION_PREFIX} {question}"]
    if evidence:
        lines.append(f"{EVIDENCE_PREFIX} {evidence}")
    return "\n".join(lines)


def examples_section(items) -> str:
    """The <examples> block: question / evidence / gold SQL per item."""
    rendered = []
    for item in items:
        lines = [f"# Question: {item.question}"]
        if item.evidence:
            lines.append(f"# Knowledge Evidence: {item.evidence}")
        lines.append(f"# Gold SQL: {item.gold_sql}")
        rendered.append("\n".join(lines))
    return "<examples>\n" + "\n\n".join(rendered) + "\n</examples>"


def description_section(schema: DbSchema, linked: dict | None = None) -> str:
    """Per-table `- column (type): description` lines for retained columns."""
    retained = (
        {t.lower(): {c.lower() for c in cols} for t, cols in linked.items()}
        if linked is not None
        else None
    )
    blocks = []
    for table in schema.tables:
        if retained is not None and table.name.lower() not in retained:
            continue
        lines = [f"# [{table.name}]"]
        for column in table.columns:
            if retained is not None and column.name.lower() not in retained[table.name.lower()]:
                continue
            entry = f"- {column.name} ({column.declared_type})" if column.declared_type else f"- {column.name}"
            if column.description:
                entry += f": {column.description}"
            lines.append(entry)
        blocks.append("\n".join(lines))
    return f"{DESCRIPTION_HEADING}\n" + "\n\n".join(blocks)


def sample_rows_section(
    db: sqlite3.Connection,
    schema: DbSchema,
    linked: dict | None = None,
    max_rows: int = 3,
) -> str:
    """Per-table CSV samples restricted to retained columns."""
    retained = (
        {t.lower(): [c for c in cols] for t, cols in linked.items()} if linked is not None else None
    )
    blocks = []
    for table in schema.tables:
        if retained is not None and table.name.lower() not in retained:
            continue
        columns = None
        if retained is not None:
            keep = {c.lower() for c in retained[table.name.lower()]}
            columns = [c for c in table.column_names() if c.lower() in keep]
        csv_text = sample_table_csv(db, table.name, max_rows, columns)
        blocks.append(f"# [{table.name}]\n{csv_text}")
    return f"{SAMPLE_ROWS_HEADING}\n" + "\n\n".join(blocks)


def json_answer_section(instruction: str, fields: list[tuple[str, str, str]]) -> str:
    """Instruction line(s) plus the JSON answer skeleton.

    fields: (name, empty_value, trailing_comment) triples rendered as
    `"name": <empty>,  // comment`.
    """
    lines = [instruction, "{"]
    for name, empty, comment in fields:
        lines.append(f'  "{name}": {empty},  // {comment}')
    lines.append("}")
    return "\n".join(lines)
