"""Spider/BIRD-style benchmark loading and prompt-fragment rendering.

Reads the standard distribution layout (tables metadata JSON, per-split
example JSON, one SQLite file per database) and renders schemas and sample
rows into the text fragments the pipeline prompts are built from.
"""

from __future__ import annotations

import csv
import io
import json
import random
import re
import sqlite3
from dataclasses import dataclass
from pathlib import Path

DIFFICULTY_LABELS = (
    "simple",
    "moderate",
    "challenging",
    "easy",
    "medium",
    "hard",
    "extra_hard",
    "unknown",
)


class BenchmarkLoadError(Exception):
    """Benchmark data is missing or inconsistent (e.g. unknown db_id)."""


class BenchmarkParseError(BenchmarkLoadError):
    """Metadata file could not be parsed; carries file and offset."""

    def __init__(self, path: Path, offset: int, reason: str):
        super().__init__(f"{path}: offset {offset}: {reason}")
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class ColumnDef:
    name: str
    declared_type: str = ""
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("column name must be nonempty")


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]

    def __post_init__(self) -> None:
        lowered = [c.name.lower() for c in self.columns]
        if len(set(lowered)) != len(lowered):
            raise ValueError(f"table {self.name}: duplicate column names")
        if not self.columns:
            raise ValueError(f"table {self.name}: must have at least one column")

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnDef | None:
        lowered = name.lower()
        for c in self.columns:
            if c.name.lower() == lowered:
                return c
        return None


@dataclass(frozen=True)
class DbSchema:
    db_id: str
    tables: tuple[TableDef, ...]
    foreign_keys: tuple[tuple[str, str], ...] = ()  # ("t1.c1", "t2.c2") pairs

    def __post_init__(self) -> None:
        lowered = [t.name.lower() for t in self.tables]
        if len(set(lowered)) != len(lowered):
            raise ValueError(f"{self.db_id}: duplicate table names")
        for left, right in self.foreign_keys:
            for endpoint in (left, right):
                table, _, column = endpoint.partition(".")
                t = self.table(table)
                if t is None or t.column(column) is None:
                    raise ValueError(f"{self.db_id}: foreign key endpoint {endpoint} not in schema")

    def table(self, name: str) -> TableDef | None:
        lowered = name.lower()
        for t in self.tables:
            if t.name.lower() == lowered:
                return t
        return None

    def canonical_table(self, name: str) -> str | None:
        t = self.table(name)
        return t.name if t is not None else None

    def canonical_column(self, table: str, column: str) -> str | None:
        """Return 'Table.Column' in schema casing, or None if absent."""
        t = self.table(table)
        if t is None:
            return None
        c = t.column(column)
        if c is None:
            return None
        return f"{t.name}.{c.name}"


@dataclass(frozen=True)
class BenchmarkExample:
    example_id: str
    db_id: str
    question: str
    gold_sql: str
    evidence: str | None = None
    difficulty: str = "unknown"

    def __post_init__(self) -> None:
        if not self.gold_sql.strip():
            raise ValueError(f"example {self.example_id}: gold_sql must be nonempty")
        if self.difficulty not in DIFFICULTY_LABELS:
            raise ValueError(f"example {self.example_id}: bad difficulty {self.difficulty!r}")


def _normalize_difficulty(raw: object) -> str:
    if not isinstance(raw, str) or not raw.strip():
        return "unknown"
    label = raw.strip().lower().replace(" ", "_").replace("-", "_")
    return label if label in DIFFICULTY_LABELS else "unknown"


def _read_json(path: Path) -> object:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise BenchmarkLoadError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise BenchmarkParseError(path, exc.pos, exc.msg) from exc


def _schema_from_entry(entry: dict, path: Path) -> DbSchema:
    try:
        db_id = entry["db_id"]
        table_names = entry["table_names_original"]
        column_names = entry["column_names_original"]
    except KeyError as exc:
        raise BenchmarkParseError(path, 0, f"schema entry missing key {exc}") from exc
    column_types = entry.get("column_types", [])
    descriptions = entry.get("column_descriptions", [])

    per_table: list[list[ColumnDef]] = [[] for _ in table_names]
    for idx, (table_idx, col_name) in enumerate(column_names):
        if table_idx < 0:  # the leading "*" pseudo-column in Spider metadata
            continue
        declared = column_types[idx] if idx < len(column_types) else ""
        described = descriptions[idx] if idx < len(descriptions) else ""
        per_table[table_idx].append(ColumnDef(col_name, declared, described or ""))

    tables = tuple(TableDef(name, tuple(cols)) for name, cols in zip(table_names, per_table))

    def _endpoint(col_idx: int) -> str:
        table_idx, col_name = column_names[col_idx]
        return f"{table_names[table_idx]}.{col_name}"

    fks = []
    for pair in entry.get("foreign_keys", []):
        left, right = pair
        if isinstance(left, int):
            fks.append((_endpoint(left), _endpoint(right)))
        else:  # already rendered as "table.column" strings
            fks.append((left, right))
    try:
        return DbSchema(db_id=db_id, tables=tables, foreign_keys=tuple(fks))
    except ValueError as exc:
        raise BenchmarkParseError(path, 0, str(exc)) from exc


def database_path(root: Path, db_id: str, split: str | None = None) -> Path:
    """Resolve the SQLite file for db_id under the benchmark root."""
    candidates = [
        root / "database" / db_id / f"{db_id}.sqlite",
        root / "databases" / db_id / f"{db_id}.sqlite",
    ]
    if split:
        candidates.append(root / f"{split}_databases" / db_id / f"{db_id}.sqlite")
    for path in candidates:
        if path.is_file():
            return path
    raise BenchmarkLoadError(f"no SQLite database file found for db_id {db_id!r} under {root}")


def load_benchmark(
    root: Path | str, split: str
) -> tuple[list[BenchmarkExample], dict[str, DbSchema]]:
    """Load one split: (examples, db_id -> DbSchema).

    Every example's db_id must resolve to a schema and a SQLite file.
    """
    root = Path(root)
    tables_doc = _read_json(root / "tables.json")
    if not isinstance(tables_doc, list):
        raise BenchmarkParseError(root / "tables.json", 0, "expected a list of schema entries")
    schemas: dict[str, DbSchema] = {}
    for entry in tables_doc:
        schema = _schema_from_entry(entry, root / "tables.json")
        schemas[schema.db_id] = schema
        database_path(root, schema.db_id, split)

    split_path = root / f"{split}.json"
    examples_doc = _read_json(split_path)
    if not isinstance(examples_doc, list):
        raise BenchmarkParseError(split_path, 0, "expected a list of examples")

    examples: list[BenchmarkExample] = []
    for idx, entry in enumerate(examples_doc):
        db_id = entry.get("db_id")
        if db_id not in schemas:
            raise BenchmarkLoadError(f"{split_path}: example {idx} references unknown db_id {db_id!r}")
        gold = entry.get("SQL") or entry.get("query") or entry.get("gold_sql") or ""
        raw_id = entry.get("question_id", entry.get("id", idx))
        evidence = entry.get("evidence") or None
        try:
            examples.append(
                BenchmarkExample(
                    example_id=str(raw_id),
                    db_id=db_id,
                    question=str(entry.get("question", "")),
                    gold_sql=str(gold),
                    evidence=evidence,
                    difficulty=_normalize_difficulty(entry.get("difficulty")),
                )
            )
        except ValueError as exc:
            raise BenchmarkParseError(split_path, idx, str(exc)) from exc
    return examples, schemas


# Mapping shape produced by the schema linker: table name -> column list.
LinkedTables = dict


def render_schema(
    schema: DbSchema,
    linked: LinkedTables | None = None,
    order_seed: int | None = None,
    shuffle_columns: bool = False,
) -> str:
    """Render `# table ( col, col )` lines plus `# t1.c1 = t2.c2` foreign keys.

    `linked` restricts tables/columns; None renders the full schema. Table
    order (and, when asked, within-table column order) is a deterministic
    permutation of order_seed; None keeps declaration order. Foreign-key
    lines keep declaration order and only appear when both endpoints are
    retained.
    """
    if linked is not None:
        retained = {t.lower(): {c.lower() for c in cols} for t, cols in linked.items()}
        tables = [t for t in schema.tables if t.name.lower() in retained]
    else:
        retained = None
        tables = list(schema.tables)

    rnd = random.Random(order_seed) if order_seed is not None else None
    if rnd is not None:
        tables = rnd.sample(tables, len(tables))

    lines = []
    kept_columns: set[str] = set()
    for t in tables:
        cols = t.column_names()
        if retained is not None:
            keep = retained[t.name.lower()]
            cols = [c for c in cols if c.lower() in keep]
        if rnd is not None and shuffle_columns:
            cols = rnd.sample(cols, len(cols))
        kept_columns.update(f"{t.name.lower()}.{c.lower()}" for c in cols)
        lines.append(f"# {t.name} ( {', '.join(cols)} )")

    fk_lines = [
        f"# {left} = {right}"
        for left, right in schema.foreign_keys
        if left.lower() in kept_columns and right.lower() in kept_columns
    ]
    if fk_lines:
        lines.append("#")
        lines.extend(fk_lines)
    return "\n".join(lines)


def sample_table_csv(
    db: sqlite3.Connection,
    table: str,
    max_rows: int,
    columns: list[str] | None = None,
) -> str:
    """Header plus up to max_rows data rows in rowid order, CSV-escaped.

    NULL renders as an empty field. `columns` restricts and orders the
    projection; default is every table column.
    """
    if max_rows < 0:
        raise ValueError("max_rows must be >= 0")
    selected = columns if columns else None
    quoted = ", ".join(f'"{c}"' for c in selected) if selected else "*"
    try:
        try:
            cur = db.execute(f'SELECT {quoted} FROM "{table}" ORDER BY rowid LIMIT ?', (max_rows,))
        except sqlite3.OperationalError:
            # WITHOUT ROWID tables have no rowid; fall back to storage order.
            cur = db.execute(f'SELECT {quoted} FROM "{table}" LIMIT ?', (max_rows,))
        rows = cur.fetchall()
        header = [d[0] for d in cur.description]
    except sqlite3.Error as exc:
        raise BenchmarkLoadError(f"sampling table {table!r} failed: {exc}") from exc
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue().rstrip("\n")


_SQL_TOKEN = re.compile(
    r"""
      '(?:[^']|'')*'            # string literal
    | `[^`]*`                   # backquoted identifier
    | \[[^\]]*\]                # bracketed identifier
    | "[^"]*"                   # double-quoted identifier
    | [A-Za-z_][A-Za-z0-9_]*    # bare word
    | \.
    | \(
    | \)
    | ,
    | [^\s]                     # other punctuation, skipped
    """,
    re.VERBOSE,
)

_SQL_KEYWORDS = frozenset(
    """
    select from where group by order having limit offset join inner left right
    full outer cross natural on as and or not in exists between like glob
    regexp match escape is null distinct case when then else end union all
    except intersect with recursive asc desc cast collate using values
    insert update delete set into partition over rows range unbounded
    preceding following current row filter
    count sum avg min max total abs round length substr substring upper lower
    trim ltrim rtrim replace instr coalesce ifnull nullif iif strftime date
    time datetime julianday unixepoch printf typeof hex quote random
    row_number rank dense_rank ntile lag lead first_value last_value
    integer real text blob numeric true false
    """.split()
)


def _tokenize_sql(sql: str) -> list[tuple[str, str]]:
    """Best-effort token stream of (kind, text); kinds: word, ident, str, punct."""
    out: list[tuple[str, str]] = []
    for m in _SQL_TOKEN.finditer(sql):
        tok = m.group(0)
        if tok.startswith("'"):
            out.append(("str", tok))
        elif tok[0] in "`[\"":
            out.append(("ident", tok[1:-1]))
        elif tok[0].isalpha() or tok[0] == "_":
            out.append(("word", tok))
        else:
            out.append(("punct", tok))
    return out


def extract_gold_identifiers(sql: str, schema: DbSchema) -> tuple[set[str], set[str]]:
    """Best-effort (tables, table.column names) referenced by a query.

    Case-insensitive match against the schema; aliases introduced via AS or
    bare-alias syntax are resolved; unqualified columns are attributed to
    every FROM-clause table that declares them. Unresolvable tokens are
    ignored.
    """
    if not sql.strip():
        raise ValueError("sql must be nonempty")
    tokens = _tokenize_sql(sql)
    names = [t for t in tokens]

    def is_name(tok: tuple[str, str]) -> bool:
        return tok[0] == "ident" or (tok[0] == "word" and tok[1].lower() not in _SQL_KEYWORDS)

    tables: set[str] = set()
    alias_map: dict[str, str] = {}
    from_tables: list[str] = []

    i = 0
    while i < len(names):
        kind, text = names[i]
        if kind == "word" and text.lower() in ("from", "join"):
            j = i + 1
            while j < len(names):
                if names[j][0] == "punct" and names[j][1] == "(":
                    break  # subquery; no base table to record here
                if is_name(names[j]):
                    canonical = schema.canonical_table(names[j][1])
                    j += 1
                    alias = None
                    if j < len(names) and names[j][0] == "word" and names[j][1].lower() == "as":
                        j += 1
                    if j < len(names) and is_name(names[j]):
                        nxt_is_dot = j + 1 < len(names) and names[j + 1] == ("punct", ".")
                        if not nxt_is_dot:
                            alias = names[j][1]
                            j += 1
                    if canonical is not None:
                        tables.add(canonical)
                        from_tables.append(canonical)
                        if alias:
                            alias_map[alias.lower()] = canonical
                    # comma-separated FROM lists continue with more tables
                    if j < len(names) and names[j] == ("punct", ","):
                        j += 1
                        continue
                break
            i = j
            continue
        i += 1

    columns: set[str] = set()
    i = 0
    while i < len(names):
        kind, text = names[i]
        if not is_name(names[i]):
            i += 1
            continue
        prev = names[i - 1] if i > 0 else None
        nxt = names[i + 1] if i + 1 < len(names) else None
        if prev is not None and prev[0] == "word" and prev[1].lower() == "as":
            i += 1
            continue
        if nxt == ("punct", "."):
            # qualified reference: alias.column or table.column
            if i + 2 < len(names) and is_name(names[i + 2]):
                qualifier = alias_map.get(text.lower()) or schema.canonical_table(text)
                if qualifier is not None:
                    resolved = schema.canonical_column(qualifier, names[i + 2][1])
                    if resolved is not None:
                        tables.add(qualifier)
                        columns.add(resolved)
            i += 3
            continue
        if nxt == ("punct", "("):
            i += 1  # function call
            continue
        if text.lower() in alias_map:
            i += 1
            continue
        for table in from_tables:
            resolved = schema.canonical_column(table, text)
            if resolved is not None:
                columns.add(resolved)
        i += 1
    return tables, columns
