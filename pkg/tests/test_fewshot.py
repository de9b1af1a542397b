from __future__ import annotations

import random

import pytest

from mpsql.benchdata import BenchmarkExample
from mpsql.fewshot import (
    ExampleIndex,
    FewShotList,
    IndexEntry,
    IndexFormatError,
    build_index,
    build_masking_prompt,
    make_prompt_variants,
    mask_question,
    select_examples,
)
from mpsql.gateway import EmbeddingVector, FixtureMissingError, LlmGateway, LlmRequest

from conftest import CountingBackend, brute_force_top_k, put_chat_fixture, put_embedding_fixture


def vec(*values: float) -> EmbeddingVector:
    return EmbeddingVector.from_values(values)


def entry(eid: str, q: EmbeddingVector, m: EmbeddingVector | None = None) -> IndexEntry:
    return IndexEntry(
        example_id=eid,
        question=f"question {eid}",
        evidence=None,
        gold_sql=f"SELECT '{eid}'",
        masked_question=f"masked {eid}",
        question_vec=q,
        masked_vec=m or q,
    )


def random_vector(rng: random.Random, dim: int = 8) -> tuple[float, ...]:
    return tuple(rng.gauss(0, 1) for _ in range(dim))


class TestMaskQuestion:
    def _gateway(self, cache, answer: str):
        example = BenchmarkExample("e1", "d", "How much did customer 6 consume in total between August and November 2013?", "SELECT 1")
        return example, answer

    def test_known_masked_forms(self, cache, tox_schema):
        cases = [
            (
                "How many Australian drivers who were born in 1980?",
                "How many [VALUE] [TABLE] who were born in [VALUE]?",
            ),
            (
                "How much did customer 6 consume in total between August and November 2013?",
                "How much did [TABLE] [VALUE] consume in total between [VALUE] and [VALUE]?",
            ),
        ]
        gateway = LlmGateway(cache, mode="strict_replay", chat_model="m")
        for question, masked in cases:
            example = BenchmarkExample("e", "toxicology_mini", question, "SELECT 1")
            prompt = build_masking_prompt(tox_schema, question, None)
            put_chat_fixture(cache, "m", LlmRequest(prompt=prompt, n=1, temperature=0.0, tag="question_masking"), [masked])
            result = mask_question(gateway, example, tox_schema)
            assert result.masked == masked
            assert result.original == question
            assert not result.used_fallback

    def test_cue_echo_stripped(self, cache, tox_schema):
        question = "How many molecules are there?"
        example = BenchmarkExample("e", "toxicology_mini", question, "SELECT 1")
        prompt = build_masking_prompt(tox_schema, question, None)
        put_chat_fixture(
            cache, "m",
            LlmRequest(prompt=prompt, n=1, temperature=0.0, tag="question_masking"),
            ["### Masked Question: How many [TABLE] are there?"],
        )
        gateway = LlmGateway(cache, mode="strict_replay", chat_model="m")
        assert mask_question(gateway, example, tox_schema).masked == "How many [TABLE] are there?"

    def test_echoed_question_is_identity(self, cache, tox_schema):
        question = "no schema tokens here"
        example = BenchmarkExample("e", "toxicology_mini", question, "SELECT 1")
        prompt = build_masking_prompt(tox_schema, question, None)
        put_chat_fixture(cache, "m", LlmRequest(prompt=prompt, n=1, temperature=0.0, tag="question_masking"), [question])
        gateway = LlmGateway(cache, mode="strict_replay", chat_model="m")
        assert mask_question(gateway, example, tox_schema).masked == question

    def test_blank_answer_falls_back_to_original(self, cache, tox_schema):
        question = "whatever"
        example = BenchmarkExample("e", "toxicology_mini", question, "SELECT 1")
        prompt = build_masking_prompt(tox_schema, question, None)
        put_chat_fixture(cache, "m", LlmRequest(prompt=prompt, n=1, temperature=0.0, tag="question_masking"), ["   \n  "])
        gateway = LlmGateway(cache, mode="strict_replay", chat_model="m")
        result = mask_question(gateway, example, tox_schema)
        assert result.masked == question
        assert result.used_fallback

    def test_gateway_miss_propagates(self, cache, tox_schema):
        example = BenchmarkExample("e", "toxicology_mini", "q", "SELECT 1")
        gateway = LlmGateway(cache, mode="strict_replay", chat_model="m")
        with pytest.raises(FixtureMissingError):
            mask_question(gateway, example, tox_schema)


class TestBuildIndex:
    def _training(self, n=10):
        return [
            BenchmarkExample(f"t{i}", "toxicology_mini", f"train question {i}", f"SELECT {i}")
            for i in range(n)
        ]

    def test_entry_per_example_with_both_vectors(self, cache, tox_schema):
        train = self._training()
        backend = CountingBackend(completions=lambda req: ["masked form"])
        backend.embed = lambda model, texts: [[len(t) + 1.0, 1.0] for t in texts]
        gateway = LlmGateway(cache, backend=backend, mode="live", chat_model="m", embed_model="e")
        index = build_index(gateway, train, {"toxicology_mini": tox_schema})
        assert len(index) == 10
        for e in index.entries:
            assert e.question_vec.dimension == 2
            assert e.masked_vec.dimension == 2

    def test_rebuild_with_warm_cache_hits_no_backend(self, cache, tox_schema):
        train = self._training(4)
        calls = {"n": 0}

        class B:
            def complete(self, model, request):
                calls["n"] += 1
                return ["masked"]

            def embed(self, model, texts):
                calls["n"] += 1
                return [[1.0, float(len(t))] for t in texts]

        gateway = LlmGateway(cache, backend=B(), mode="live", chat_model="m", embed_model="e")
        build_index(gateway, train, {"toxicology_mini": tox_schema})
        before = calls["n"]
        assert before > 0
        build_index(gateway, train, {"toxicology_mini": tox_schema})
        assert calls["n"] == before

    def test_empty_training_rejected(self, cache, tox_schema):
        gateway = LlmGateway(cache, mode="strict_replay")
        with pytest.raises(ValueError):
            build_index(gateway, [], {})


class TestSelectExamples:
    def test_self_similarity_ranks_first(self):
        entries = [entry("a", vec(1, 0)), entry("b", vec(0, 1)), entry("c", vec(1, 1))]
        index = ExampleIndex(entries, "e")
        got = select_examples(index, vec(0, 1), "question", k=2)
        assert got[0].example_id == "b"

    def test_k_larger_than_index(self):
        entries = [entry("a", vec(1, 0)), entry("b", vec(0, 1))]
        index = ExampleIndex(entries, "e")
        assert len(select_examples(index, vec(1, 1), "question", k=10)) == 2

    def test_exclude_filters_before_ranking(self):
        entries = [entry("a", vec(1, 0)), entry("b", vec(0.9, 0.1))]
        index = ExampleIndex(entries, "e")
        got = select_examples(index, vec(1, 0), "question", k=1, exclude="a")
        assert [e.example_id for e in got] == ["b"]

    def test_duplicate_vectors_tie_break_by_id(self):
        shared = vec(0.5, 0.5)
        entries = [entry("z", shared), entry("a", shared), entry("m", shared)]
        index = ExampleIndex(entries, "e")
        got = select_examples(index, vec(1, 1), "question", k=3)
        assert [e.example_id for e in got] == ["a", "m", "z"]

    def test_matches_brute_force_oracle(self):
        rng = random.Random(42)
        entries = []
        for i in range(50):
            q = random_vector(rng)
            m = random_vector(rng)
            entries.append(entry(f"e{i:02d}", vec(*q), vec(*m)))
        # duplicated vectors to force ties through the id tie-break
        entries.append(entry("dup1", entries[0].question_vec, entries[0].masked_vec))
        entries.append(entry("dup0", entries[0].question_vec, entries[0].masked_vec))
        index = ExampleIndex(entries, "e")
        for strategy in ("question", "masked"):
            for k in (1, 5, 20):
                for trial in range(10):
                    query = random_vector(rng)
                    got = [e.example_id for e in select_examples(index, vec(*query), strategy, k)]
                    want = brute_force_top_k(entries, vec(*query).values, strategy, k)
                    assert got == want, (strategy, k, trial)

    def test_invalid_k(self):
        index = ExampleIndex([entry("a", vec(1, 0))], "e")
        with pytest.raises(ValueError):
            select_examples(index, vec(1, 0), "question", k=0)


class TestPromptVariants:
    def _gateway_for(self, cache, question: str, masked: str, qvec, mvec, schema):
        prompt = build_masking_prompt(schema, question, None)
        put_chat_fixture(cache, "m", LlmRequest(prompt=prompt, n=1, temperature=0.0, tag="question_masking"), [masked])
        put_embedding_fixture(cache, "e", question, list(qvec))
        put_embedding_fixture(cache, "e", masked, list(mvec))
        return LlmGateway(cache, mode="strict_replay", chat_model="m", embed_model="e")

    def test_pure_strategies_for_pq_two(self, cache, tox_schema):
        entries = [
            entry("a", vec(1, 0), vec(0, 1)),
            entry("b", vec(0, 1), vec(1, 0)),
            entry("c", vec(1, 1), vec(1, 1)),
        ]
        index = ExampleIndex(entries, "e")
        example = BenchmarkExample("test", "toxicology_mini", "the question", "SELECT 1")
        gateway = self._gateway_for(cache, "the question", "the [TABLE]", (1.0, 0.0), (1.0, 0.0), tox_schema)
        variants = make_prompt_variants(gateway, index, example, tox_schema, k=2, p_q=2)
        assert [v.strategy for v in variants] == ["question", "masked"]
        assert [i.example_id for i in variants[0].items] == ["a", "c"]
        assert [i.example_id for i in variants[1].items] == ["b", "c"]

    def test_interleave_of_disjoint_rankings(self, cache, tox_schema):
        # hand-computed: Q ranking a,b; MQ ranking c,d -> interleaves
        entries = [
            entry("a", vec(1, 0, 0), vec(0, 0, 1)),
            entry("b", vec(0.9, 0.1, 0), vec(0, 0.1, 0.9)),
            entry("c", vec(0, 1, 0), vec(1, 0, 0)),
            entry("d", vec(0, 0.9, 0.1), vec(0.9, 0, 0.1)),
        ]
        index = ExampleIndex(entries, "e")
        example = BenchmarkExample("test", "toxicology_mini", "q-text", "SELECT 1")
        gateway = self._gateway_for(cache, "q-text", "mq-text", (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), tox_schema)
        variants = make_prompt_variants(gateway, index, example, tox_schema, k=2, p_q=5)
        by_strategy = {v.strategy: [i.example_id for i in v.items] for v in variants}
        assert by_strategy["question"] == ["a", "b"]
        assert by_strategy["masked"] == ["c", "d"]
        assert by_strategy["interleave_question_first"] == ["a", "c"]
        assert by_strategy["interleave_masked_first"] == ["c", "a"]

    def test_identical_rankings_collapse(self, cache, tox_schema):
        entries = [entry("a", vec(1, 0)), entry("b", vec(0.8, 0.2)), entry("c", vec(0, 1))]
        index = ExampleIndex(entries, "e")
        example = BenchmarkExample("test", "toxicology_mini", "same", "SELECT 1")
        gateway = self._gateway_for(cache, "same", "same-masked", (1.0, 0.0), (1.0, 0.0), tox_schema)
        variants = make_prompt_variants(gateway, index, example, tox_schema, k=2, p_q=5)
        sets = [{i.example_id for i in v.items} for v in variants]
        assert all(s == sets[0] for s in sets)

    def test_never_contains_test_example_or_duplicates(self, cache, tox_schema):
        entries = [entry("test", vec(1, 0)), entry("x", vec(1, 0.01)), entry("y", vec(0, 1))]
        index = ExampleIndex(entries, "e")
        example = BenchmarkExample("test", "toxicology_mini", "q2", "SELECT 1")
        gateway = self._gateway_for(cache, "q2", "mq2", (1.0, 0.0), (0.0, 1.0), tox_schema)
        variants = make_prompt_variants(gateway, index, example, tox_schema, k=3, p_q=5)
        for v in variants:
            ids = [i.example_id for i in v.items]
            assert "test" not in ids
            assert len(set(ids)) == len(ids)

    def test_repeated_calls_identical(self, cache, tox_schema):
        entries = [entry("a", vec(1, 0)), entry("b", vec(0, 1))]
        index = ExampleIndex(entries, "e")
        example = BenchmarkExample("t", "toxicology_mini", "q3", "SELECT 1")
        gateway = self._gateway_for(cache, "q3", "mq3", (0.6, 0.8), (0.8, 0.6), tox_schema)
        first = make_prompt_variants(gateway, index, example, tox_schema, k=2, p_q=5)
        second = make_prompt_variants(gateway, index, example, tox_schema, k=2, p_q=5)
        assert first == second

    def test_pq_bounds(self, cache, tox_schema):
        index = ExampleIndex([entry("a", vec(1, 0))], "e")
        example = BenchmarkExample("t", "toxicology_mini", "q4", "SELECT 1")
        gateway = self._gateway_for(cache, "q4", "mq4", (1.0, 0.0), (1.0, 0.0), tox_schema)
        with pytest.raises(ValueError):
            make_prompt_variants(gateway, index, example, tox_schema, k=1, p_q=6)
        with pytest.raises(ValueError):
            make_prompt_variants(gateway, index, example, tox_schema, k=1, p_q=0)


class TestIndexPersistence:
    def test_round_trip(self, tmp_path):
        entries = [entry("a", vec(1, 0), vec(0, 1)), entry("b", vec(0.5, 0.5))]
        index = ExampleIndex(entries, "model-x")
        path = tmp_path / "index.json"
        index.save(path)
        loaded = ExampleIndex.load(path)
        assert loaded.model_id == "model-x"
        assert loaded.dimension == 2
        assert [e.example_id for e in loaded.entries] == ["a", "b"]
        assert loaded.entries[0].question_vec == entries[0].question_vec

    def test_format_version_checked(self, tmp_path):
        path = tmp_path / "index.json"
        path.write_text('{"format_version": 999, "entries": [], "model_id": "m"}')
        with pytest.raises(IndexFormatError):
            ExampleIndex.load(path)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ExampleIndex([entry("a", vec(1, 0)), entry("b", vec(1, 0, 0))], "e")


class TestFewShotListInvariants:
    def test_duplicate_ids_rejected(self):
        from mpsql.fewshot import FewShotItem

        item = FewShotItem("a", "q", None, "SELECT 1")
        with pytest.raises(ValueError):
            FewShotList(0, "question", (item, item))
