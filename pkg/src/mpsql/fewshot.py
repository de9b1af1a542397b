"""Question masking, embedding index, and few-shot prompt variant assembly.

Two retrieval strategies (raw-question similarity and masked-question
similarity) feed several deterministically composed few-shot lists, one per
generation prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .benchdata import BenchmarkExample, DbSchema
from .gateway import EmbeddingVector, GatewayError, LlmGateway, LlmRequest
from .prompts import question_section, schema_section

INDEX_FORMAT_VERSION = 1
MASKED_CUE = "### Masked Question:"

# The masking few-shots are fixed template text; the LLM sees them before the
# target schema and question and answers with the masked question alone.
_MASKING_EXAMPLES = """<example1>
### SQLite SQL tables, with their properties:
# customers ( CustomerID: integer, Segment: text, Currency: text )
# gasstations ( GasStationID: integer, ChainID: integer, Country: text, Segment: text )
# products ( ProductID: integer, Description: text )
# transactions_1k ( TransactionID: integer, Date: date, Time: text, CustomerID: integer, CardID: integer, GasStationID: integer, ProductID: integer, Amount: integer, Price: real )
# yearmonth ( CustomerID: integer, Date: text, Consumption: real )

### Question: For all the people who paid more than 29.00 per unit of product id No.5. Give their consumption status in the August of 2012.
### Masked Question: For all the [TABLE] who paid more than [VALUE] per unit of [COLUMN] [VALUE]. Give their consumption status in the [VALUE].
</example1>

<example2>
### SQLite SQL tables, with their properties:
# customers ( CustomerID: integer, Segment: text, Currency: text )
# gasstations ( GasStationID: integer, ChainID: integer, Country: text, Segment: text )
# products ( ProductID: integer, Description: text )
# transactions_1k ( TransactionID: integer, Date: date, Time: text, CustomerID: integer, CardID: integer, GasStationID: integer, ProductID: integer, Amount: integer, Price: real )
# yearmonth ( CustomerID: integer, Date: text, Consumption: real )

### Question: How much did customer 6 consume in total between August and November 2013?
### Masked Question: How much did [TABLE] [VALUE] consume in total between [VALUE] and [VALUE]?
</example2>

<example3>
### SQLite SQL tables, with their properties:
# drivers ( driverId: integer, driverRef: text, number: integer, code: text, forename: text, surname: text, dob: date, nationality: text, url: text )

### Question: How many Australian drivers who were born in 1980?
### Masked Question: How many [VALUE] [TABLE] who were born in [VALUE]?
</example3>"""

VARIANT_RECIPES = (
    "question",
    "masked",
    "interleave_question_first",
    "interleave_masked_first",
    "rank_sum",
)


class IndexFormatError(Exception):
    pass


@dataclass(frozen=True)
class MaskedQuestion:
    original: str
    masked: str
    used_fallback: bool = False  # set when the answer was unusable

    def __post_init__(self) -> None:
        if not self.masked:
            raise ValueError("masked question must be nonempty")


@dataclass(frozen=True)
class IndexEntry:
    example_id: str
    question: str
    evidence: str | None
    gold_sql: str
    masked_question: str
    question_vec: EmbeddingVector
    masked_vec: EmbeddingVector


@dataclass(frozen=True)
class FewShotItem:
    example_id: str
    question: str
    evidence: str | None
    gold_sql: str


@dataclass(frozen=True)
class FewShotList:
    variant_index: int
    strategy: str
    items: tuple[FewShotItem, ...]
    degraded_to_question: bool = False  # masking unavailable for this example

    def __post_init__(self) -> None:
        ids = [i.example_id for i in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("few-shot list contains duplicate examples")


class ExampleIndex:
    """Immutable embedding index over training examples; exact cosine search."""

    def __init__(self, entries: list[IndexEntry], model_id: str):
        if not entries:
            raise ValueError("index requires at least one entry")
        dims = {e.question_vec.dimension for e in entries} | {e.masked_vec.dimension for e in entries}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self.entries = list(entries)
        self.model_id = model_id
        self.dimension = dims.pop()
        self._question_matrix = np.array([e.question_vec.values for e in entries], dtype=np.float64)
        self._masked_matrix = np.array([e.masked_vec.values for e in entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self, strategy: str) -> np.ndarray:
        if strategy == "question":
            return self._question_matrix
        if strategy == "masked":
            return self._masked_matrix
        raise ValueError(f"unknown strategy {strategy!r}")

    def save(self, path: Path | str) -> None:
        doc = {
            "format_version": INDEX_FORMAT_VERSION,
            "model_id": self.model_id,
            "dimension": self.dimension,
            "entries": [
                {
                    "example_id": e.example_id,
                    "question": e.question,
                    "evidence": e.evidence,
                    "gold_sql": e.gold_sql,
                    "masked_question": e.masked_question,
                    "question_vec": list(e.question_vec.values),
                    "masked_vec": list(e.masked_vec.values),
                }
                for e in self.entries
            ],
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path | str) -> ExampleIndex:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format_version") != INDEX_FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index format {doc.get('format_version')!r}")
        entries = [
            IndexEntry(
                example_id=e["example_id"],
                question=e["question"],
                evidence=e.get("evidence"),
                gold_sql=e["gold_sql"],
                masked_question=e["masked_question"],
                question_vec=EmbeddingVector.from_values(e["question_vec"]),
                masked_vec=EmbeddingVector.from_values(e["masked_vec"]),
            )
            for e in doc["entries"]
        ]
        return cls(entries, doc["model_id"])


def build_masking_prompt(schema: DbSchema, question: str, evidence: str | None) -> str:
    head = "### Given a DB schema and a question, mask the table name, column name, and values in the question."
    return "\n\n".join(
        [
            head,
            _MASKING_EXAMPLES,
            schema_section(schema),
            question_section(question, evidence),
            MASKED_CUE,
        ]
    )


def mask_question(gateway: LlmGateway, example: BenchmarkExample, schema: DbSchema) -> MaskedQuestion:
    """Single deterministic LLM call; falls back to the original question."""
    prompt = build_masking_prompt(schema, example.question, example.evidence)
    completions = gateway.complete(
        LlmRequest(
            prompt=prompt,
            n=1,
            temperature=0.0,
            tag="question_masking",
            meta={"example_id": example.example_id},
        )
    )
    text = completions[0].raw_text if completions else ""
    if MASKED_CUE in text:
        text = text.rsplit(MASKED_CUE, 1)[1]
    for line in text.splitlines():
        if line.strip():
            return MaskedQuestion(example.question, line.strip())
    return MaskedQuestion(example.question, example.question, used_fallback=True)


def build_index(
    gateway: LlmGateway,
    train: list[BenchmarkExample],
    schemas: dict[str, DbSchema],
) -> ExampleIndex:
    """Mask and embed every training question; both vectors cached by text."""
    if not train:
        raise ValueError("training examples required")
    masked = [mask_question(gateway, ex, schemas[ex.db_id]) for ex in train]
    question_vecs = gateway.embed([ex.question for ex in train])
    masked_vecs = gateway.embed([m.masked for m in masked])
    entries = [
        IndexEntry(
            example_id=ex.example_id,
            question=ex.question,
            evidence=ex.evidence,
            gold_sql=ex.gold_sql,
            masked_question=m.masked,
            question_vec=qv,
            masked_vec=mv,
        )
        for ex, m, qv, mv in zip(train, masked, question_vecs, masked_vecs)
    ]
    return ExampleIndex(entries, gateway.embed_model)


def select_examples(
    index: ExampleIndex,
    query_vec: EmbeddingVector,
    strategy: str,
    k: int,
    exclude: str | None = None,
) -> list[IndexEntry]:
    """Top-k entries by cosine similarity, ties broken by example_id ascending.

    Scores are per-row dot products rather than one matrix product: blocked
    BLAS matmul can differ in the last ulp by row position, which would make
    equal vectors tie-break inconsistently.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.array(query_vec.values, dtype=np.float64)
    matrix = index.matrix(strategy)
    sims = [float(np.dot(matrix[i], query)) for i in range(len(index.entries))]
    ranked = sorted(
        (i for i, e in enumerate(index.entries) if e.example_id != exclude),
        key=lambda i: (-sims[i], index.entries[i].example_id),
    )
    return [index.entries[i] for i in ranked[:k]]


def _rank_positions(index: ExampleIndex, query_vec: EmbeddingVector, strategy: str, exclude: str | None) -> dict[str, int]:
    full = select_examples(index, query_vec, strategy, k=len(index), exclude=exclude)
    return {e.example_id: pos for pos, e in enumerate(full)}


def _interleave(first: list[IndexEntry], second: list[IndexEntry], k: int) -> list[IndexEntry]:
    out: list[IndexEntry] = []
    seen: set[str] = set()
    for pair in zip(first, second):
        for entry in pair:
            if entry.example_id not in seen:
                seen.add(entry.example_id)
                out.append(entry)
    longer = first if len(first) > len(second) else second
    for entry in longer[min(len(first), len(second)):]:
        if entry.example_id not in seen:
            seen.add(entry.example_id)
            out.append(entry)
    return out[:k]


def _to_items(entries: list[IndexEntry]) -> tuple[FewShotItem, ...]:
    return tuple(FewShotItem(e.example_id, e.question, e.evidence, e.gold_sql) for e in entries)


def make_prompt_variants(
    gateway: LlmGateway,
    index: ExampleIndex,
    example: BenchmarkExample,
    schema: DbSchema,
    k: int,
    p_q: int,
) -> list[FewShotList]:
    """The p_q ordered few-shot lists for one test example.

    Variant 0 ranks by raw-question similarity, variant 1 by masked-question
    similarity; the remaining recipes interleave or merge the two rankings.
    When masking fails, masked-based variants degrade to raw-question
    similarity (recorded on the list).
    """
    if p_q < 1 or p_q > len(VARIANT_RECIPES):
        raise ValueError(f"p_q must be in [1, {len(VARIANT_RECIPES)}]")
    question_vec = gateway.embed([example.question])[0]
    degraded = False
    try:
        masked = mask_question(gateway, example, schema)
        masked_vec = gateway.embed([masked.masked])[0]
        degraded = masked.used_fallback
    except GatewayError:
        masked_vec = question_vec
        degraded = True

    exclude = example.example_id
    by_question = select_examples(index, question_vec, "question", k, exclude)
    by_masked = select_examples(index, masked_vec, "masked", k, exclude)

    def rank_sum() -> list[IndexEntry]:
        q_rank = _rank_positions(index, question_vec, "question", exclude)
        m_rank = _rank_positions(index, masked_vec, "masked", exclude)
        merged = sorted(q_rank, key=lambda eid: (q_rank[eid] + m_rank[eid], eid))
        by_id = {e.example_id: e for e in index.entries}
        return [by_id[eid] for eid in merged[:k]]

    builders = {
        "question": lambda: by_question,
        "masked": lambda: by_masked,
        "interleave_question_first": lambda: _interleave(by_question, by_masked, k),
        "interleave_masked_first": lambda: _interleave(by_masked, by_question, k),
        "rank_sum": rank_sum,
    }
    variants = []
    for variant_index in range(p_q):
        recipe = VARIANT_RECIPES[variant_index]
        entries = builders[recipe]()
        variants.append(
            FewShotList(
                variant_index=variant_index,
                strategy=recipe,
                items=_to_items(entries),
                degraded_to_question=degraded and recipe != "question",
            )
        )
    return variants
