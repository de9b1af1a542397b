from __future__ import annotations

import json
import sqlite3
from pathlib import Path

import pytest

from mpsql.benchdata import ColumnDef, DbSchema, TableDef
from mpsql.config import RunConfig
from mpsql.gateway import ResponseCache, chat_request_key, embedding_request_key

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "desk.json"
DESK_BENCHMARK = REPO / "fixtures" / "desk" / "benchmark"
GOLDEN = Path(__file__).parent / "golden"


def _col(name: str, declared: str = "text", description: str = "") -> ColumnDef:
    return ColumnDef(name, declared, description)


@pytest.fixture(scope="session")
def tox_schema() -> DbSchema:
    # mirrors fixtures/desk/benchmark tables.json for toxicology_mini
    return DbSchema(
        db_id="toxicology_mini",
        tables=(
            TableDef(
                "molecule",
                (
                    _col("molecule_id", "text", "unique id of molecule"),
                    _col("label", "text", "whether this molecule is carcinogenic or not"),
                ),
            ),
            TableDef(
                "connected",
                (
                    _col("atom_id", "text", "id of the first atom"),
                    _col("atom_id2", "text", "id of the second atom"),
                    _col("bond_id", "text", "bond connecting the two atoms"),
                ),
            ),
            TableDef(
                "bond",
                (
                    _col("bond_id", "text", "unique id representing bonds"),
                    _col("molecule_id", "text", "identifying the molecule in which the bond appears"),
                    _col("bond_type", "text", "type of the bond"),
                ),
            ),
            TableDef(
                "atom",
                (
                    _col("atom_id", "text", "unique id of atoms"),
                    _col("molecule_id", "text", "identifying the molecule the atom belongs to"),
                    _col("element", "text", "chemical element of the atom"),
                ),
            ),
        ),
        foreign_keys=(
            ("atom.molecule_id", "molecule.molecule_id"),
            ("bond.molecule_id", "molecule.molecule_id"),
            ("connected.bond_id", "bond.bond_id"),
            ("connected.atom_id2", "atom.atom_id"),
            ("connected.atom_id", "atom.atom_id"),
        ),
    )


@pytest.fixture(scope="session")
def desk_config() -> RunConfig:
    assert DESK_CONFIG.is_file(), "desk fixtures missing; run tools/build_desk_fixtures.py"
    return RunConfig.from_file(DESK_CONFIG)


@pytest.fixture(scope="session")
def tox_db_path(desk_config) -> Path:
    return Path(desk_config.benchmark_root) / "database" / "toxicology_mini" / "toxicology_mini.sqlite"


@pytest.fixture(scope="session")
def f1_db_path(desk_config) -> Path:
    return Path(desk_config.benchmark_root) / "database" / "formula1_mini" / "formula1_mini.sqlite"


@pytest.fixture
def cache(tmp_path) -> ResponseCache:
    return ResponseCache(tmp_path / "cache")


class CountingBackend:
    """Minimal live backend for gateway tests: canned answers, call counting."""

    def __init__(self, completions=None, vectors=None):
        self.completions = completions or {}
        self.vectors = vectors or {}
        self.complete_calls = 0
        self.embed_calls = 0

    def complete(self, model, request):
        self.complete_calls += 1
        if callable(self.completions):
            return self.completions(request)
        return self.completions.get(request.prompt, ["{}"] * request.n)

    def embed(self, model, texts):
        self.embed_calls += 1
        return [self.vectors.get(t, [1.0, 0.0, 0.0]) for t in texts]


def put_chat_fixture(cache: ResponseCache, model: str, request, completions: list[str]) -> str:
    """Author a replay entry for a chat request; returns its hash key."""
    key = chat_request_key(model, request)
    cache.put(
        key,
        {
            "version": 1,
            "kind": "chat",
            "model": model,
            "tag": request.tag,
            "request": {
                "prompt": request.prompt,
                "n": request.n,
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens,
            },
            "completions": completions,
        },
    )
    return key


def put_embedding_fixture(cache: ResponseCache, model: str, text: str, vector: list[float]) -> str:
    key = embedding_request_key(model, text)
    cache.put(
        key,
        {
            "version": 1,
            "kind": "embedding",
            "model": model,
            "tag": "embedding",
            "request": {"text": text},
            "vector": vector,
        },
    )
    return key


def ok_outcome(digest: str, ms: float = 1.0):
    from mpsql.executor import ExecutionOutcome, ResultFingerprint

    return ExecutionOutcome(
        "ok", fingerprint=ResultFingerprint(digest), row_count=1, exec_time_ms=ms
    )


def err_outcome():
    from mpsql.executor import ExecutionOutcome

    return ExecutionOutcome("syntax_error", error="boom")


def make_pool(groups: dict[str, int], times: dict[str, list[float]] | None = None):
    """Candidates + outcomes with the given per-fingerprint group sizes."""
    from mpsql.generator import CandidateQuery

    candidates, outcomes = [], []
    i = 0
    for digest, size in groups.items():
        for j in range(size):
            ms = times[digest][j] if times else float(10 + i)
            candidates.append(CandidateQuery(f"SELECT '{digest}' -- {j}", 0, i))
            outcomes.append(ok_outcome(digest, ms))
            i += 1
    return candidates, outcomes


def brute_force_top_k(entries, query_values, strategy, k, exclude=None):
    """Independent retrieval oracle: plain-python cosine scan, ties by id."""
    import math

    scored = []
    for e in entries:
        if e.example_id == exclude:
            continue
        other = e.question_vec.values if strategy == "question" else e.masked_vec.values
        dot = sum(a * b for a, b in zip(query_values, other))
        norm_q = math.sqrt(sum(a * a for a in query_values))
        norm_o = math.sqrt(sum(b * b for b in other))
        scored.append((-(dot / (norm_q * norm_o)), e.example_id))
    scored.sort()
    return [eid for _, eid in scored[:k]]


def make_mini_benchmark(root: Path, n_examples: int = 10) -> Path:
    """Self-contained two-database benchmark for loader tests."""
    root.mkdir(parents=True, exist_ok=True)
    tables = [
        {
            "db_id": "alpha",
            "table_names_original": ["items"],
            "column_names_original": [[0, "id"], [0, "name"]],
            "column_types": ["integer", "text"],
            "foreign_keys": [],
        },
        {
            "db_id": "beta",
            "table_names_original": ["users", "orders"],
            "column_names_original": [[0, "uid"], [0, "city"], [1, "oid"], [1, "uid"]],
            "column_types": ["integer", "text", "integer", "integer"],
            "foreign_keys": [["orders.uid", "users.uid"]],
        },
    ]
    (root / "tables.json").write_text(json.dumps(tables), encoding="utf-8")
    examples = []
    difficulties = ["simple", "moderate", "challenging", "easy", "extra hard", None]
    for i in range(n_examples):
        db_id = "alpha" if i % 2 == 0 else "beta"
        table = "items" if db_id == "alpha" else "users"
        entry = {
            "question_id": f"q{i}",
            "db_id": db_id,
            "question": f"how many rows in {table}? (case {i})",
            "SQL": f"SELECT COUNT(*) FROM {table}",
        }
        difficulty = difficulties[i % len(difficulties)]
        if difficulty:
            entry["difficulty"] = difficulty
        examples.append(entry)
    (root / "dev.json").write_text(json.dumps(examples), encoding="utf-8")
    (root / "empty.json").write_text("[]", encoding="utf-8")
    for db_id, ddl, rows in (
        ("alpha", "CREATE TABLE items (id INTEGER, name TEXT)", [(1, "a"), (2, "b"), (3, "c")]),
        ("beta", "CREATE TABLE users (uid INTEGER, city TEXT); CREATE TABLE orders (oid INTEGER, uid INTEGER)", [(1, "x"), (2, "y")]),
    ):
        db_dir = root / "database" / db_id
        db_dir.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(db_dir / f"{db_id}.sqlite")
        conn.executescript(ddl)
        conn.executemany(
            f"INSERT INTO {'items' if db_id == 'alpha' else 'users'} VALUES (?, ?)", rows
        )
        conn.commit()
        conn.close()
    return root
