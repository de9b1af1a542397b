"""Deterministic pseudo-LLM backend used to record the desk-scale replay fixtures.

Every answer is a pure function of the request (tag, example id, prompt
index, question), so regenerating the fixture bundle reproduces the same
bytes. The pipeline under test never imports this module; it consumes the
recorded cache through the strict-replay gateway.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from typing import Sequence

import numpy as np

from mpsql.gateway import LlmRequest

EMBED_DIM = 32

# --- per-example scripts -------------------------------------------------

GOLD_TABLES = {
    "tox_001": ["bond"],
    "tox_002": ["molecule"],
    "tox_003": ["bond"],
    "tox_004": ["atom"],
    "tox_005": ["bond"],
    "tox_006": ["connected", "atom", "molecule"],
    "f1_001": ["drivers"],
    "f1_002": ["drivers"],
    "f1_003": ["constructorStandings", "constructors"],
    "f1_004": ["drivers"],
    "f1_005": ["drivers"],
    "f1_006": ["drivers"],
}

GOLD_COLUMNS = {
    "tox_001": ["bond.bond_type", "bond.molecule_id"],
    "tox_002": ["molecule.label"],
    "tox_003": ["bond.bond_id", "bond.bond_type"],
    "tox_004": ["atom.molecule_id"],
    "tox_005": ["bond.molecule_id"],
    "tox_006": [
        "connected.atom_id",
        "atom.atom_id",
        "atom.molecule_id",
        "molecule.molecule_id",
        "molecule.label",
    ],
    "f1_001": ["drivers.code", "drivers.nationality"],
    "f1_002": ["drivers.nationality", "drivers.dob"],
    "f1_003": [
        "constructorStandings.constructorId",
        "constructorStandings.points",
        "constructors.constructorId",
        "constructors.name",
    ],
    "f1_004": ["drivers.surname", "drivers.code"],
    "f1_005": ["drivers.forename", "drivers.surname", "drivers.nationality"],
    "f1_006": ["drivers.nationality"],
}

# Extra (harmless) names the jittered samples occasionally add.
EXTRA_TABLES = {
    "toxicology_mini": ["molecule", "bond", "atom"],
    "formula1_mini": ["constructors", "drivers"],
}
EXTRA_COLUMNS = {
    "tox_001": "bond.bond_id",
    "tox_002": "molecule.molecule_id",
    "tox_003": "bond.molecule_id",
    "tox_004": "atom.atom_id",
    "tox_005": "bond.bond_id",
    "tox_006": "connected.atom_id2",
    "f1_001": "drivers.driverId",
    "f1_002": "drivers.driverId",
    "f1_003": "constructorStandings.constructorStandingsId",
    "f1_004": "drivers.driverId",
    "f1_005": "drivers.code",
    "f1_006": "drivers.driverId",
}

MASKED_QUESTIONS = {
    # dev split
    "tox_001": "Among all chemical compounds identified in the database, what percent of compounds form a [VALUE].",
    "tox_002": "How many [TABLE] are [VALUE]?",
    "tox_003": "List [COLUMN] of all [VALUE] bonds.",
    "tox_004": "How many [TABLE] does [TABLE] [VALUE] have?",
    "tox_005": "Which [TABLE] have at least [VALUE] [TABLE]? List their ids.",
    "tox_006": "How many pairs of [TABLE] [TABLE] belong to [VALUE] [TABLE]?",
    "f1_001": "List out the [COLUMN] for [TABLE] who have [COLUMN] in [VALUE].",
    "f1_002": "How many [VALUE] [TABLE] who were born in [VALUE]?",
    "f1_003": "Which [TABLE] has the highest [COLUMN]?",
    "f1_004": "What is the [COLUMN] of the [TABLE] with [COLUMN] [VALUE]?",
    "f1_005": "List the [COLUMN] and [COLUMN] of all [VALUE] [TABLE].",
    "f1_006": "How many [TABLE] are there for each [COLUMN] with more than [VALUE] [TABLE]? List [COLUMN] and count ordered by count descending.",
    # train split
    "tox_t01": "How many [TABLE] are in the database?",
    "tox_t02": "How many [TABLE] are not [VALUE]?",
    "tox_t03": "List the ids of all [VALUE] [TABLE].",
    "tox_t04": "What is the percentage of [VALUE] [TABLE]?",
    "tox_t05": "How many [TABLE] does [TABLE] [VALUE] have?",
    "tox_t06": "List all [COLUMN] of [VALUE] bonds.",
    "tox_t07": "Which [COLUMN] appear in [TABLE] [VALUE]?",
    "tox_t08": "How many [TABLE] are [TABLE] by [TABLE] [VALUE]?",
    "f1_t01": "How many [TABLE] are there?",
    "f1_t02": "List the [COLUMN] of all [VALUE] [TABLE].",
    "f1_t03": "What is the [COLUMN] of the [TABLE] with [COLUMN] [VALUE]?",
    "f1_t04": "How many [VALUE] [TABLE] are there?",
    "f1_t05": "List the [COLUMN] of all [TABLE].",
    "f1_t06": "What is the highest [COLUMN] total recorded in the [TABLE].",
    "f1_t07": "List the [COLUMN] of [TABLE] born after [VALUE].",
    "f1_t08": "Which [TABLE] is [VALUE]?",
}

# Wrong-but-executable alternatives per dev example.
WRONG_SQL = {
    "tox_001": [
        "SELECT CAST(COUNT(CASE WHEN bond_type = '#' THEN 1 ELSE NULL END) AS REAL) * 100 / COUNT(*) FROM bond",
        "SELECT COUNT(*) FROM bond WHERE bond_type = '#'",
    ],
    "tox_002": ["SELECT COUNT(*) FROM molecule WHERE label = '-'"],
    "tox_003": ["SELECT bond_id FROM bond WHERE bond_type = '-'"],
    "tox_004": ["SELECT COUNT(*) FROM atom WHERE molecule_id = 'TR001'"],
    "tox_005": ["SELECT molecule_id FROM bond GROUP BY molecule_id HAVING COUNT(*) > 2"],
    "tox_006": ["SELECT COUNT(*) FROM connected"],
    "f1_001": ["SELECT code FROM drivers WHERE nationality = 'American'"],
    "f1_002": ["SELECT COUNT(*) FROM drivers WHERE nationality = 'Australian'"],
    "f1_003": [
        "SELECT name FROM constructors ORDER BY constructorId LIMIT 1",
        "SELECT T2.name FROM constructorStandings AS T1 INNER JOIN constructors AS T2 ON T1.constructorId = T2.constructorId ORDER BY T1.points ASC LIMIT 1",
    ],
    "f1_004": ["SELECT forename FROM drivers WHERE code = 'HAM'"],
    "f1_005": ["SELECT surname, forename FROM drivers WHERE nationality = 'French'"],
    "f1_006": [
        "SELECT nationality, COUNT(*) FROM drivers GROUP BY nationality ORDER BY COUNT(*) DESC",
        "SELECT nationality FROM drivers GROUP BY nationality HAVING COUNT(*) > 1",
    ],
}

# Examples whose candidate pools keep two confident groups so the
# multiple-choice vote actually runs; f1_006 is scripted to end up wrong.
MCS_PATH = {"tox_001", "f1_003"}
WRONG_FINAL = {"f1_006"}


def _rng(*parts: object) -> random.Random:
    seed = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return random.Random(int.from_bytes(seed[:8], "big"))


def _answer(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False)


class ScriptedBackend:
    """Backend protocol implementation with hand-authored, seeded answers."""

    def __init__(self, gold_sql_by_id: dict[str, str]):
        self.gold_sql_by_id = gold_sql_by_id

    # -- embeddings --------------------------------------------------------

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            digest = hashlib.sha256(f"{model}\x1f{text}".encode("utf-8")).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
            vec = rng.normal(size=EMBED_DIM)
            out.append((vec / np.linalg.norm(vec)).tolist())
        return out

    # -- chat --------------------------------------------------------------

    def complete(self, model: str, request: LlmRequest) -> list[str]:
        tag = request.tag
        if tag == "table_linking":
            return self._tables(request)
        if tag == "column_linking":
            return self._columns(request)
        if tag == "question_masking":
            return self._mask(request)
        if tag == "sql_generation":
            return self._generate(request)
        if tag == "mcs":
            return self._vote(request)
        raise AssertionError(f"scripted backend got unexpected tag {tag!r}")

    def _tables(self, request: LlmRequest) -> list[str]:
        example_id = request.meta["example_id"]
        prompt_index = int(request.meta["prompt_index"])
        gold = GOLD_TABLES[example_id]
        if example_id == "tox_006":
            # Only the third prompt surfaces the bridging table; single-prompt
            # runs miss it, multi-prompt unions recover it.
            gold = gold if prompt_index == 2 else [t for t in gold if t != "connected"]
        rng = _rng("tables", example_id, prompt_index)
        extras_pool = EXTRA_TABLES["toxicology_mini" if example_id.startswith("tox") else "formula1_mini"]
        samples = []
        for sample_index in range(request.n):
            roll = rng.random()
            if roll < 0.05:
                samples.append("I cannot answer in the requested format.")
                continue
            tables = list(gold)
            if example_id != "tox_006" and roll > 0.8:
                extra = extras_pool[sample_index % len(extras_pool)]
                if extra not in tables:
                    tables.append(extra)
            if example_id == "tox_002" and prompt_index == 0 and sample_index == 3:
                tables.append("atoms2")  # hallucination, must be dropped
            samples.append(_answer({"reasoning": f"tables needed: {', '.join(tables)}", "tables": tables}))
        return samples

    def _columns(self, request: LlmRequest) -> list[str]:
        example_id = request.meta["example_id"]
        prompt_index = int(request.meta["prompt_index"])
        gold = GOLD_COLUMNS[example_id]
        rng = _rng("columns", example_id, prompt_index)
        samples = []
        for sample_index in range(request.n):
            roll = rng.random()
            if roll < 0.05:
                samples.append("{\"reasoning\": \"missing the answer field\"}")
                continue
            columns = list(gold)
            if roll > 0.85:
                extra = EXTRA_COLUMNS[example_id]
                if extra not in columns:
                    columns.append(extra)
            if example_id == "tox_003" and prompt_index == 1 and sample_index == 2:
                columns.append("bond.not_a_col")  # hallucination, must be dropped
            samples.append(_answer({"reasoning": "columns the query touches", "columns": columns}))
        return samples

    def _mask(self, request: LlmRequest) -> list[str]:
        example_id = request.meta["example_id"]
        masked = MASKED_QUESTIONS[example_id]
        if example_id == "tox_004":
            return [f"### Masked Question: {masked}"]  # cue-echo form
        return [masked]

    def _generate(self, request: LlmRequest) -> list[str]:
        example_id = request.meta["example_id"]
        prompt_index = int(request.meta["prompt_index"])
        gold = self.gold_sql_by_id[example_id]
        wrong = WRONG_SQL[example_id]
        gold_variant = "select" + gold[6:] if gold.upper().startswith("SELECT") else gold

        plan: list[tuple[str, str]] = []  # (kind, sql)
        if example_id in WRONG_FINAL:
            plan += [("json", wrong[0])] * 12
            plan += [("json", wrong[1])] * 7
            plan += [("malformed", "")]
        elif example_id in MCS_PATH:
            plan += [("json", gold)] * 11
            plan += [("json", wrong[0])] * 6
            plan += [("json", wrong[1 % len(wrong)])] * 2
            plan += [("malformed", "")]
        else:
            plan += [("json", gold)] * 13
            plan += [("fenced", gold_variant)] * 3
            plan += [("json", wrong[0])] * 2
            plan += [("malformed", "")]
            plan += [("json", "SELEC 1 FROM nowhere")]
        if example_id == "tox_002" and prompt_index == 4:
            plan[-1] = ("json", "SELECT 1; DROP TABLE molecule")  # must be rejected
        plan = plan[: request.n]

        samples = []
        for kind, sql in plan:
            if kind == "malformed":
                samples.append("Sure! The query you want is SELECT ... (not in JSON form)")
            elif kind == "fenced":
                body = _answer({"reasoning": "reformatted", "sql": sql})
                samples.append(f"Here is the answer:\n```json\n{body}\n```")
            else:
                samples.append(_answer({"reasoning": f"derived from the schema for {example_id}", "sql": sql}))
        return samples

    def _vote(self, request: LlmRequest) -> list[str]:
        example_id = request.meta["example_id"]
        gold = self.gold_sql_by_id[example_id]
        section = request.prompt.split("### Candidate SQLs:", 1)[1].split("### Checklist:", 1)[0]
        listed = re.findall(r"^\d+\. (.+)$", section, flags=re.MULTILINE)
        norm = lambda s: re.sub(r"\s+", " ", s).strip().rstrip(";").lower()
        gold_position = next((i for i, sql in enumerate(listed) if norm(sql) == norm(gold)), None)
        winner = gold_position if gold_position is not None else 0
        runner_up = 1 if winner == 0 and len(listed) > 1 else 0
        votes = [listed[winner]] * 14 + [listed[runner_up]] * 4
        samples = [
            _answer({"reasoning": "checked the checklist", "sql": sql}) for sql in votes
        ]
        samples += ["no json here", "{\"reasoning\": \"missing sql field\"}"]
        return samples[: request.n]
