"""Build the desk-scale fixture profile: benchmark files, SQLite databases,
and the strict-replay cache recorded from the scripted backend.

Run from the repository root:

    python3 tools/build_desk_fixtures.py [--force]

Everything written is deterministic; the replay cache additionally records
the single-prompt (p_t=1) linking requests used by the recall comparison.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sqlite3
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tools"))

from mpsql.config import RunConfig
from mpsql.gateway import LlmGateway, ResponseCache
from mpsql.pipeline import init_run, run_all, stage_link

from scripted import ScriptedBackend

FIXTURES = REPO / "fixtures" / "desk"
BENCHMARK = FIXTURES / "benchmark"
REPLAY = FIXTURES / "replay"
CONFIG_PATH = REPO / "configs" / "desk.json"

DESK_CONFIG = {
    "p_t": 3,
    "p_c": 3,
    "p_q": 5,
    "n": 20,
    "k": 4,
    "T": 0.2,
    "temperature": 1.0,
    "max_output_tokens": 1024,
    "exec_timeout_ms": 5000,
    "sample_rows": 3,
    "max_choices": 3,
    "seed": 13,
    "backend": "strict_replay",
    "chat_model": "scripted-chat-v1",
    "embed_model": "scripted-embed-v1",
    "benchmark_root": "../fixtures/desk/benchmark",
    "cache_dir": "../fixtures/desk/replay",
    "runs_dir": "../runs",
    "timing": "stub",
    "workers": 2,
    "train_split": "train",
}


# --- benchmark metadata ----------------------------------------------------

TOX_TABLES = {
    "molecule": [
        ("molecule_id", "text", "unique id of molecule"),
        ("label", "text", "whether this molecule is carcinogenic or not"),
    ],
    "connected": [
        ("atom_id", "text", "id of the first atom"),
        ("atom_id2", "text", "id of the second atom"),
        ("bond_id", "text", "bond connecting the two atoms"),
    ],
    "bond": [
        ("bond_id", "text", "unique id representing bonds"),
        ("molecule_id", "text", "identifying the molecule in which the bond appears"),
        ("bond_type", "text", "type of the bond"),
    ],
    "atom": [
        ("atom_id", "text", "unique id of atoms"),
        ("molecule_id", "text", "identifying the molecule the atom belongs to"),
        ("element", "text", "chemical element of the atom"),
    ],
}
TOX_FOREIGN_KEYS = [
    ("atom.molecule_id", "molecule.molecule_id"),
    ("bond.molecule_id", "molecule.molecule_id"),
    ("connected.bond_id", "bond.bond_id"),
    ("connected.atom_id2", "atom.atom_id"),
    ("connected.atom_id", "atom.atom_id"),
]

F1_TABLES = {
    "drivers": [
        ("driverId", "integer", "unique identification number of the driver"),
        ("driverRef", "text", "driver reference name"),
        ("number", "integer", "driver race number"),
        ("code", "text", "abbreviated code of the driver"),
        ("forename", "text", "first name of the driver"),
        ("surname", "text", "last name of the driver"),
        ("dob", "date", "date of birth"),
        ("nationality", "text", "nationality of the driver"),
        ("url", "text", "driver wiki page"),
    ],
    "constructors": [
        ("constructorId", "integer", "unique identification number of the constructor"),
        ("name", "text", "constructor name"),
        ("nationality", "text", "nationality of the constructor"),
    ],
    "constructorStandings": [
        ("constructorStandingsId", "integer", "unique id of the standing record"),
        ("constructorId", "integer", "id of the constructor"),
        ("points", "real", "championship points"),
    ],
}
F1_FOREIGN_KEYS = [("constructorStandings.constructorId", "constructors.constructorId")]

TOX_ROWS = {
    "molecule": [
        ("TR000", "+"), ("TR001", "+"), ("TR002", "-"), ("TR003", "-"),
        ("TR004", "+"), ("TR005", "-"), ("TR006", "+"), ("TR007", "+"),
    ],
    "bond": [
        ("TR000_1_2", "TR000", "-"), ("TR000_2_3", "TR000", "-"), ("TR000_2_4", "TR000", "-"),
        ("TR001_1_2", "TR001", "#"), ("TR001_2_3", "TR001", "="),
        ("TR002_1_2", "TR002", "-"),
        ("TR003_1_2", "TR003", "#"), ("TR003_2_3", "TR003", "-"),
        ("TR004_1_2", "TR004", "="),
        ("TR005_1_2", "TR005", "-"),
        ("TR006_1_2", "TR006", "="), ("TR006_2_3", "TR006", "#"),
        ("TR007_1_2", "TR007", "-"),
    ],
    "atom": [
        ("TR000_1", "TR000", "c"), ("TR000_2", "TR000", "n"),
        ("TR000_3", "TR000", "o"), ("TR000_4", "TR000", "c"),
        ("TR001_1", "TR001", "c"), ("TR001_2", "TR001", "c"), ("TR001_3", "TR001", "h"),
        ("TR002_1", "TR002", "cl"), ("TR002_2", "TR002", "c"),
        ("TR003_1", "TR003", "c"), ("TR003_2", "TR003", "n"), ("TR003_3", "TR003", "c"),
        ("TR004_1", "TR004", "o"), ("TR004_2", "TR004", "c"),
        ("TR005_1", "TR005", "s"), ("TR005_2", "TR005", "c"),
        ("TR006_1", "TR006", "c"), ("TR006_2", "TR006", "c"), ("TR006_3", "TR006", "n"),
        ("TR007_1", "TR007", "h"), ("TR007_2", "TR007", "c"),
    ],
    "connected": [
        ("TR000_1", "TR000_2", "TR000_1_2"), ("TR000_2", "TR000_3", "TR000_2_3"),
        ("TR000_2", "TR000_4", "TR000_2_4"),
        ("TR001_1", "TR001_2", "TR001_1_2"), ("TR001_2", "TR001_3", "TR001_2_3"),
        ("TR003_1", "TR003_2", "TR003_1_2"), ("TR003_2", "TR003_3", "TR003_2_3"),
        ("TR006_1", "TR006_2", "TR006_1_2"), ("TR006_2", "TR006_3", "TR006_2_3"),
    ],
}

F1_ROWS = {
    "drivers": [
        (1, "hamilton", 44, "HAM", "Lewis", "Hamilton", "1985-01-07", "British", "http://example.org/hamilton"),
        (2, "webber", 2, "WEB", "Mark", "Webber", "1976-08-27", "Australian", "http://example.org/webber"),
        (3, "ricciardo", 3, "RIC", "Daniel", "Ricciardo", "1989-07-01", "Australian", "http://example.org/ricciardo"),
        (4, "ambrose", 9, "AMB", "Marcos", "Ambrose", "1976-09-01", "Australian", "http://example.org/ambrose"),
        (5, "piquet", 33, "PIQ", "Nelson", "Piquet", "1985-07-25", "Brazilian", "http://example.org/piquet"),
        (6, "rossi_a", 98, "RSA", "Alexander", "Rossi", "1991-09-25", "America", "http://example.org/rossi"),
        (7, "grosjean", 8, "GRO", "Romain", "Grosjean", "1986-04-17", "French", "http://example.org/grosjean"),
        (8, "gasly", 10, "GAS", "Pierre", "Gasly", "1996-02-07", "French", "http://example.org/gasly"),
        (9, "power", 12, "POW", "Will", "Power", "1980-03-01", "Australian", "http://example.org/power"),
        (10, "jones_b", 19, "JON", "Brandon", "Jones", "1980-05-12", "America", "http://example.org/jones"),
    ],
    "constructors": [
        (1, "Red Bull", "Austrian"),
        (2, "Mercedes", "German"),
        (3, "Ferrari", "Italian"),
        (4, "McLaren", "British"),
    ],
    "constructorStandings": [
        (1, 1, 302.5), (2, 2, 387.0), (3, 3, 228.0), (4, 4, 156.0), (5, 1, 250.0), (6, 2, 410.5),
    ],
}

DEV_EXAMPLES = [
    {
        "question_id": "tox_001",
        "db_id": "toxicology_mini",
        "question": "Among all chemical compounds identified in the database, what percent of compounds form a triple-bond.",
        "evidence": "triple bond refers to bond_type = '#';",
        "SQL": "SELECT CAST(COUNT(DISTINCT CASE WHEN T1.bond_type = '#' THEN T1.molecule_id ELSE NULL END) AS REAL) * 100 / COUNT(DISTINCT T1.molecule_id) FROM bond AS T1",
        "difficulty": "moderate",
    },
    {
        "question_id": "tox_002",
        "db_id": "toxicology_mini",
        "question": "How many molecules are carcinogenic?",
        "evidence": "carcinogenic refers to label = '+';",
        "SQL": "SELECT COUNT(*) FROM molecule WHERE label = '+'",
        "difficulty": "simple",
    },
    {
        "question_id": "tox_003",
        "db_id": "toxicology_mini",
        "question": "List bond ids of all double bonds.",
        "evidence": "double bond refers to bond_type = '=';",
        "SQL": "SELECT bond_id FROM bond WHERE bond_type = '='",
        "difficulty": "simple",
    },
    {
        "question_id": "tox_004",
        "db_id": "toxicology_mini",
        "question": "How many atoms does molecule TR000 have?",
        "SQL": "SELECT COUNT(*) FROM atom WHERE molecule_id = 'TR000'",
        "difficulty": "simple",
    },
    {
        "question_id": "tox_005",
        "db_id": "toxicology_mini",
        "question": "Which molecules have at least 2 bonds? List their ids.",
        "SQL": "SELECT molecule_id FROM bond GROUP BY molecule_id HAVING COUNT(*) >= 2",
        "difficulty": "moderate",
    },
    {
        "question_id": "tox_006",
        "db_id": "toxicology_mini",
        "question": "How many pairs of connected atoms belong to carcinogenic molecules?",
        "evidence": "carcinogenic refers to label = '+';",
        "SQL": "SELECT COUNT(*) FROM connected AS T1 INNER JOIN atom AS T2 ON T1.atom_id = T2.atom_id INNER JOIN molecule AS T3 ON T2.molecule_id = T3.molecule_id WHERE T3.label = '+'",
        "difficulty": "challenging",
    },
    {
        "question_id": "f1_001",
        "db_id": "formula1_mini",
        "question": "List out the code for drivers who have nationality in America.",
        "evidence": "nationality = 'America'",
        "SQL": "SELECT code FROM drivers WHERE nationality = 'America'",
    },
    {
        "question_id": "f1_002",
        "db_id": "formula1_mini",
        "question": "How many Australian drivers who were born in 1980?",
        "SQL": "SELECT COUNT(*) FROM drivers WHERE nationality = 'Australian' AND STRFTIME('%Y', dob) = '1980'",
        "difficulty": "moderate",
    },
    {
        "question_id": "f1_003",
        "db_id": "formula1_mini",
        "question": "Which constructor has the highest point?",
        "SQL": "SELECT T2.name FROM constructorStandings AS T1 INNER JOIN constructors AS T2 ON T1.constructorId = T2.constructorId ORDER BY T1.points DESC LIMIT 1",
        "difficulty": "hard",
    },
    {
        "question_id": "f1_004",
        "db_id": "formula1_mini",
        "question": "What is the surname of the driver with code 'HAM'?",
        "SQL": "SELECT surname FROM drivers WHERE code = 'HAM'",
        "difficulty": "easy",
    },
    {
        "question_id": "f1_005",
        "db_id": "formula1_mini",
        "question": "List the forename and surname of all French drivers.",
        "SQL": "SELECT forename, surname FROM drivers WHERE nationality = 'French'",
        "difficulty": "medium",
    },
    {
        "question_id": "f1_006",
        "db_id": "formula1_mini",
        "question": "How many drivers are there for each nationality with more than one driver? List nationality and count ordered by count descending.",
        "SQL": "SELECT nationality, COUNT(*) FROM drivers GROUP BY nationality HAVING COUNT(*) > 1 ORDER BY COUNT(*) DESC",
        "difficulty": "extra hard",
    },
]

TRAIN_EXAMPLES = [
    ("tox_t01", "toxicology_mini", "How many molecules are in the database?", None,
     "SELECT COUNT(*) FROM molecule"),
    ("tox_t02", "toxicology_mini", "How many molecules are not carcinogenic?",
     "not carcinogenic refers to label = '-';",
     "SELECT COUNT(*) FROM molecule WHERE label = '-'"),
    ("tox_t03", "toxicology_mini", "List the ids of all carcinogenic molecules.",
     "carcinogenic refers to label = '+';",
     "SELECT molecule_id FROM molecule WHERE label = '+'"),
    ("tox_t04", "toxicology_mini", "What is the percentage of carcinogenic molecules?",
     "percentage = DIVIDE(COUNT(label = '+'), COUNT(molecule_id)) * 100;",
     "SELECT CAST(SUM(CASE WHEN label = '+' THEN 1 ELSE 0 END) AS REAL) * 100 / COUNT(*) FROM molecule"),
    ("tox_t05", "toxicology_mini", "How many bonds does molecule TR001 have?", None,
     "SELECT COUNT(*) FROM bond WHERE molecule_id = 'TR001'"),
    ("tox_t06", "toxicology_mini", "List all bond ids of single bonds.",
     "single bond refers to bond_type = '-';",
     "SELECT bond_id FROM bond WHERE bond_type = '-'"),
    ("tox_t07", "toxicology_mini", "Which elements appear in molecule TR000?", None,
     "SELECT DISTINCT element FROM atom WHERE molecule_id = 'TR000'"),
    ("tox_t08", "toxicology_mini", "How many atoms are connected by bond TR000_1_2?", None,
     "SELECT COUNT(*) FROM connected WHERE bond_id = 'TR000_1_2'"),
    ("f1_t01", "formula1_mini", "How many drivers are there?", None,
     "SELECT COUNT(*) FROM drivers"),
    ("f1_t02", "formula1_mini", "List the codes of all British drivers.", None,
     "SELECT code FROM drivers WHERE nationality = 'British'"),
    ("f1_t03", "formula1_mini", "What is the date of birth of the driver with code 'WEB'?", None,
     "SELECT dob FROM drivers WHERE code = 'WEB'"),
    ("f1_t04", "formula1_mini", "How many French drivers are there?", None,
     "SELECT COUNT(*) FROM drivers WHERE nationality = 'French'"),
    ("f1_t05", "formula1_mini", "List the names of all constructors.", None,
     "SELECT name FROM constructors"),
    ("f1_t06", "formula1_mini", "What is the highest point total recorded in the constructor standings?", None,
     "SELECT MAX(points) FROM constructorStandings"),
    ("f1_t07", "formula1_mini", "List the surname of drivers born after 1985.", None,
     "SELECT surname FROM drivers WHERE STRFTIME('%Y', dob) > '1985'"),
    ("f1_t08", "formula1_mini", "Which constructor is Austrian?", None,
     "SELECT name FROM constructors WHERE nationality = 'Austrian'"),
]


def _tables_entry(db_id: str, tables: dict, foreign_keys: list) -> dict:
    table_names = list(tables)
    column_names = []
    column_types = []
    descriptions = []
    for idx, name in enumerate(table_names):
        for col_name, col_type, description in tables[name]:
            column_names.append([idx, col_name])
            column_types.append(col_type)
            descriptions.append(description)
    return {
        "db_id": db_id,
        "table_names_original": table_names,
        "column_names_original": column_names,
        "column_types": column_types,
        "column_descriptions": descriptions,
        "foreign_keys": [list(pair) for pair in foreign_keys],
    }


def _build_db(path: Path, tables: dict, rows: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(path)
    try:
        for name, columns in tables.items():
            cols = ", ".join(f'"{c}" {t.upper()}' for c, t, _ in columns)
            conn.execute(f'CREATE TABLE "{name}" ({cols})')
            placeholders = ", ".join("?" for _ in columns)
            conn.executemany(f'INSERT INTO "{name}" VALUES ({placeholders})', rows[name])
        conn.commit()
    finally:
        conn.close()


def write_benchmark() -> None:
    BENCHMARK.mkdir(parents=True, exist_ok=True)
    tables_doc = [
        _tables_entry("toxicology_mini", TOX_TABLES, TOX_FOREIGN_KEYS),
        _tables_entry("formula1_mini", F1_TABLES, F1_FOREIGN_KEYS),
    ]
    (BENCHMARK / "tables.json").write_text(json.dumps(tables_doc, indent=2) + "\n", encoding="utf-8")
    (BENCHMARK / "dev.json").write_text(json.dumps(DEV_EXAMPLES, indent=2) + "\n", encoding="utf-8")
    train_doc = [
        {"question_id": qid, "db_id": db, "question": q, "evidence": ev, "SQL": sql}
        for qid, db, q, ev, sql in TRAIN_EXAMPLES
    ]
    (BENCHMARK / "train.json").write_text(json.dumps(train_doc, indent=2) + "\n", encoding="utf-8")
    _build_db(BENCHMARK / "database" / "toxicology_mini" / "toxicology_mini.sqlite", TOX_TABLES, TOX_ROWS)
    _build_db(BENCHMARK / "database" / "formula1_mini" / "formula1_mini.sqlite", F1_TABLES, F1_ROWS)


def write_config() -> None:
    CONFIG_PATH.parent.mkdir(parents=True, exist_ok=True)
    CONFIG_PATH.write_text(json.dumps(DESK_CONFIG, indent=2) + "\n", encoding="utf-8")


def record_replay() -> None:
    """Run the pipeline once against the scripted backend, recording fixtures."""
    if REPLAY.exists():
        shutil.rmtree(REPLAY)
    REPLAY.mkdir(parents=True)

    gold_by_id = {e["question_id"]: e["SQL"] for e in DEV_EXAMPLES}
    backend = ScriptedBackend(gold_by_id)

    base = {k: v for k, v in DESK_CONFIG.items() if k != "T"}
    base["threshold"] = DESK_CONFIG["T"]
    base["benchmark_root"] = str(BENCHMARK)
    base["cache_dir"] = str(REPLAY)
    config = RunConfig(**{**base, "backend": "live"})

    def gateway():
        return LlmGateway(
            ResponseCache(REPLAY),
            backend=backend,
            mode="live",
            chat_model=config.chat_model,
            embed_model=config.embed_model,
        )

    with tempfile.TemporaryDirectory() as tmp:
        ctx = init_run(config, "dev", Path(tmp) / "record", gateway=gateway())
        report = run_all(ctx)
        print(f"recorded full run: EX {report.ex_overall:.3f}, unanswered {report.unanswered}")

        # Single-prompt linking requests (prompt 0 is shared, so this only
        # adds the p_t=1 column prompts that differ through linked tables).
        single = RunConfig(**{**base, "backend": "live", "p_t": 1, "p_c": 1})
        ctx1 = init_run(single, "dev", Path(tmp) / "record-single", gateway=gateway())
        stage_link(ctx1)
        print("recorded single-prompt linking requests")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--force", action="store_true", help="rebuild even if fixtures exist")
    args = parser.parse_args()
    if FIXTURES.exists() and not args.force:
        print(f"{FIXTURES} already exists; use --force to rebuild")
        return
    write_benchmark()
    write_config()
    record_replay()
    entries = len(list(REPLAY.glob("*.json")))
    print(f"done: {entries} replay entries under {REPLAY}")


if __name__ == "__main__":
    main()
