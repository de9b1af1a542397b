"""Stage orchestration over a run directory: link, generate, select, eval.

Each stage reads the previous stage's JSON artifacts and writes its own, so
any stage can be rerun in isolation; the manifest tracks completion and
guards resumed runs against configuration drift.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import evaluate, fewshot, generator, linker, report, selector
from .benchdata import (
    BenchmarkExample,
    BenchmarkLoadError,
    DbSchema,
    database_path,
    load_benchmark,
)
from .config import ConfigError, RunConfig
from .executor import execute
from .gateway import GatewayError, HttpBackend, LlmGateway, ResponseCache
from .linker import LinkedSchema

MANIFEST_VERSION = 1
STAGES = ("link", "generate", "select", "eval")


class PipelineError(Exception):
    pass


class StagePrerequisiteError(PipelineError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _benchmark_fingerprint(root: Path, split: str, train_split: str) -> str:
    digest = hashlib.sha256()
    for name in ("tables.json", f"{split}.json", f"{train_split}.json"):
        path = root / name
        if path.is_file():
            digest.update(name.encode())
            digest.update(path.read_bytes())
    for db_file in sorted(root.glob("database/*/*.sqlite")):
        digest.update(db_file.name.encode())
        digest.update(str(db_file.stat().st_size).encode())
    return digest.hexdigest()


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    benchmark: dict
    stages: dict
    created_at: str
    updated_at: str
    version: int = MANIFEST_VERSION

    @classmethod
    def fresh(cls, config: RunConfig, split: str, root: Path) -> RunManifest:
        now = _now()
        return cls(
            config=config.to_dict(),
            config_hash=config.config_hash(),
            benchmark={
                "root": str(root),
                "split": split,
                "content_hash": _benchmark_fingerprint(root, split, config.train_split),
            },
            stages={name: {"completed": False, "counters": {}} for name in STAGES},
            created_at=now,
            updated_at=now,
        )

    def save(self, run_dir: Path) -> None:
        self.updated_at = _now()
        _write_json(run_dir / "manifest.json", dataclasses.asdict(self))

    @classmethod
    def load(cls, run_dir: Path) -> RunManifest:
        path = run_dir / "manifest.json"
        if not path.is_file():
            raise StagePrerequisiteError(f"no manifest in {run_dir}; initialize the run first")
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc.pop("version", None)
        return cls(**doc, version=MANIFEST_VERSION)

    def mark_complete(self, stage: str, counters: dict, run_dir: Path) -> None:
        self.stages[stage] = {"completed": True, "counters": counters, "finished_at": _now()}
        self.save(run_dir)

    def is_complete(self, stage: str) -> bool:
        return bool(self.stages.get(stage, {}).get("completed"))


@dataclass
class RunContext:
    config: RunConfig
    split: str
    run_dir: Path
    examples: list[BenchmarkExample]
    schemas: dict[str, DbSchema]
    db_paths: dict[str, Path]
    gateway: LlmGateway
    manifest: RunManifest


def make_gateway(config: RunConfig) -> LlmGateway:
    cache_dir = config.cache_dir or str(Path(config.runs_dir) / "cache")
    cache = ResponseCache(cache_dir)
    backend = None
    if config.backend == "live":
        api_key = os.environ.get(config.api_key_env, "")
        if not api_key:
            raise GatewayError(
                f"live backend needs an API key in ${config.api_key_env}"
            )
        backend = HttpBackend(config.api_base, api_key)
    return LlmGateway(
        cache,
        backend=backend,
        mode=config.backend,
        chat_model=config.chat_model,
        embed_model=config.embed_model,
        max_in_flight=config.gateway_in_flight,
    )


def _load_context(
    config: RunConfig,
    split: str,
    run_dir: Path,
    manifest: RunManifest,
    example_ids: list[str] | None,
    gateway: LlmGateway | None = None,
) -> RunContext:
    root = Path(config.benchmark_root)
    examples, schemas = load_benchmark(root, split)
    if example_ids:
        wanted = set(example_ids)
        missing = wanted - {e.example_id for e in examples}
        if missing:
            raise BenchmarkLoadError(f"unknown example ids: {', '.join(sorted(missing))}")
        examples = [e for e in examples if e.example_id in wanted]
    db_paths = {db_id: database_path(root, db_id, split) for db_id in schemas}
    return RunContext(
        config=config,
        split=split,
        run_dir=run_dir,
        examples=examples,
        schemas=schemas,
        db_paths=db_paths,
        gateway=gateway or make_gateway(config),
        manifest=manifest,
    )


def init_run(
    config: RunConfig,
    split: str,
    run_dir: Path | str,
    example_ids: list[str] | None = None,
    gateway: LlmGateway | None = None,
) -> RunContext:
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.fresh(config, split, Path(config.benchmark_root))
    if example_ids:
        manifest.benchmark["example_filter"] = sorted(example_ids)
    manifest.save(run_dir)
    return _load_context(config, split, run_dir, manifest, example_ids, gateway)


def open_run(
    run_dir: Path | str,
    overrides: dict | None = None,
    gateway: LlmGateway | None = None,
) -> RunContext:
    """Reopen an existing run, optionally with config overrides.

    Without overrides the stored config must hash-match the manifest, which
    protects resumed runs from silent configuration drift.
    """
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    config = RunConfig.from_sources(manifest.config, overrides)
    if not overrides and config.config_hash() != manifest.config_hash:
        raise ConfigError("run manifest config hash mismatch; artifacts predate a config change")
    example_ids = manifest.benchmark.get("example_filter")
    return _load_context(config, manifest.benchmark["split"], run_dir, manifest, example_ids, gateway)


def _map_examples(ctx: RunContext, fn) -> list:
    if ctx.config.workers <= 1 or len(ctx.examples) <= 1:
        return [fn(e) for e in ctx.examples]
    with ThreadPoolExecutor(max_workers=ctx.config.workers) as pool:
        return list(pool.map(fn, ctx.examples))


def stage_link(ctx: RunContext) -> dict:
    """Schema linking for every example; artifacts under linked/."""
    out_dir = ctx.run_dir / "linked"

    def _one(example: BenchmarkExample) -> dict:
        schema = ctx.schemas[example.db_id]
        try:
            tables, table_traces, table_counters = linker.link_tables(
                ctx.gateway, example, schema, ctx.config
            )
            linked, column_traces, column_counters = linker.link_columns(
                ctx.gateway, example, schema, tables, ctx.config
            )
            error = None
        except (linker.LinkingError, GatewayError) as exc:
            # Degrade to the full schema so one broken example never aborts
            # the run; the error is recorded in the artifact.
            if isinstance(exc, linker.LinkingError) and not ctx.config.fallback_full_schema:
                raise
            linked = LinkedSchema(
                db_id=schema.db_id,
                tables={t.name: t.column_names() for t in schema.tables},
            )
            table_traces, column_traces = [], []
            table_counters = {"parse_drops": 0, "fallback_all_tables": True}
            column_counters = {"parse_drops": 0, "fk_forced": [], "table_fallbacks": []}
            error = str(exc)
        _write_json(
            out_dir / f"{example.example_id}.json",
            {
                "example_id": example.example_id,
                "db_id": example.db_id,
                "linked": linked.tables,
                "error": error,
                "table_stage": {
                    "counters": table_counters,
                    "traces": [dataclasses.asdict(t) for t in table_traces],
                },
                "column_stage": {
                    "counters": column_counters,
                    "traces": [dataclasses.asdict(t) for t in column_traces],
                },
            },
        )
        return {
            "parse_drops": table_counters["parse_drops"] + column_counters["parse_drops"],
            "fallback_all_tables": int(table_counters["fallback_all_tables"]),
            "table_fallbacks": len(column_counters["table_fallbacks"]),
            "errors": int(error is not None),
        }

    totals = {"parse_drops": 0, "fallback_all_tables": 0, "table_fallbacks": 0, "errors": 0}
    for counters in _map_examples(ctx, _one):
        for key in totals:
            totals[key] += counters[key]
    ctx.manifest.mark_complete("link", totals, ctx.run_dir)
    return totals


def load_linked_schemas(ctx: RunContext) -> dict[str, LinkedSchema]:
    out: dict[str, LinkedSchema] = {}
    linked_dir = ctx.run_dir / "linked"
    for example in ctx.examples:
        path = linked_dir / f"{example.example_id}.json"
        if not path.is_file():
            raise StagePrerequisiteError(f"missing linked schema for example {example.example_id}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        out[example.example_id] = LinkedSchema(db_id=doc["db_id"], tables=doc["linked"])
    return out


def _index_path(ctx: RunContext) -> Path:
    root = Path(ctx.config.benchmark_root)
    digest = hashlib.sha256()
    train_file = root / f"{ctx.config.train_split}.json"
    digest.update(train_file.read_bytes())
    digest.update(ctx.config.embed_model.encode())
    digest.update(ctx.config.chat_model.encode())
    cache_dir = ctx.config.cache_dir or str(Path(ctx.config.runs_dir) / "cache")
    return Path(cache_dir) / "index" / f"{digest.hexdigest()}.json"


def build_or_load_index(ctx: RunContext) -> fewshot.ExampleIndex:
    path = _index_path(ctx)
    if path.is_file():
        return fewshot.ExampleIndex.load(path)
    train, train_schemas = load_benchmark(Path(ctx.config.benchmark_root), ctx.config.train_split)
    index = fewshot.build_index(ctx.gateway, train, train_schemas)
    index.save(path)
    return index


def stage_generate(ctx: RunContext) -> dict:
    """Few-shot variants plus candidate generation; artifacts under candidates/."""
    if not ctx.manifest.is_complete("link"):
        raise StagePrerequisiteError("generate requires a completed link stage")
    linked_schemas = load_linked_schemas(ctx)
    index = build_or_load_index(ctx)
    out_dir = ctx.run_dir / "candidates"

    def _one(example: BenchmarkExample) -> dict:
        schema = ctx.schemas[example.db_id]
        linked = linked_schemas[example.example_id]
        db = sqlite3.connect(f"file:{ctx.db_paths[example.db_id]}?mode=ro", uri=True)
        variants = []
        try:
            variants = fewshot.make_prompt_variants(
                ctx.gateway, index, example, schema, ctx.config.k, ctx.config.p_q
            )
            candidates, counters, prompts = generator.generate_candidates(
                ctx.gateway, example, linked, schema, db, variants, ctx.config
            )
            error = None
        except (generator.GenerationError, GatewayError) as exc:
            candidates, prompts = [], []
            counters = {"parse_drops": 0, "empty_drops": 0, "multi_statement_drops": 0, "salvaged": 0}
            error = str(exc)
        finally:
            db.close()
        _write_json(
            out_dir / f"{example.example_id}.json",
            {
                "example_id": example.example_id,
                "db_id": example.db_id,
                "error": error,
                "counters": counters,
                "prompts": prompts,
                "fewshot_variants": [
                    {
                        "variant_index": v.variant_index,
                        "strategy": v.strategy,
                        "degraded_to_question": v.degraded_to_question,
                        "example_ids": [i.example_id for i in v.items],
                    }
                    for v in variants
                ],
                "mcs_fewshot": [dataclasses.asdict(i) for i in variants[0].items] if variants else [],
                "candidates": [dataclasses.asdict(c) for c in candidates],
            },
        )
        return {**counters, "errors": int(error is not None)}

    totals = {"parse_drops": 0, "empty_drops": 0, "multi_statement_drops": 0, "salvaged": 0, "errors": 0}
    for counters in _map_examples(ctx, _one):
        for key in totals:
            totals[key] += counters[key]
    ctx.manifest.mark_complete("generate", totals, ctx.run_dir)
    return totals


def _selection_dirs(ctx: RunContext, tag: str | None) -> tuple[Path, Path]:
    suffix = f"_{tag}" if tag else ""
    return ctx.run_dir / f"selection{suffix}", ctx.run_dir / f"predictions{suffix}.json"


def stage_select(ctx: RunContext, tag: str | None = None) -> dict:
    """Execute candidates, filter, vote; writes predictions and traces.

    A tag keeps re-selections (e.g. a different threshold) beside the
    original outputs instead of clobbering them.
    """
    if not ctx.manifest.is_complete("generate"):
        raise StagePrerequisiteError("select requires a completed generate stage")
    selection_dir, predictions_path = _selection_dirs(ctx, tag)

    def _one(example: BenchmarkExample) -> tuple[str, str | None, str | None]:
        doc = json.loads(
            (ctx.run_dir / "candidates" / f"{example.example_id}.json").read_text(encoding="utf-8")
        )
        schema = ctx.schemas[example.db_id]
        linked_doc = json.loads(
            (ctx.run_dir / "linked" / f"{example.example_id}.json").read_text(encoding="utf-8")
        )
        linked = LinkedSchema(db_id=linked_doc["db_id"], tables=linked_doc["linked"])
        candidates = [generator.CandidateQuery(**c) for c in doc["candidates"]]
        # Stub timing zeroes execution times, so fastest-per-group dedup falls
        # back to provenance order and selection artifacts are byte-stable.
        exec_kwargs = {"clock": (lambda: 0.0)} if ctx.config.timing == "stub" else {}
        outcomes = [
            execute(
                ctx.db_paths[example.db_id],
                c.sql,
                ctx.config.exec_timeout_ms,
                distinct_rows=ctx.config.distinct_rows,
                **exec_kwargs,
            )
            for c in candidates
        ]
        mcs_items = tuple(fewshot.FewShotItem(**i) for i in doc["mcs_fewshot"])
        mcs_fewshot = fewshot.FewShotList(variant_index=0, strategy="question", items=mcs_items)
        db = sqlite3.connect(f"file:{ctx.db_paths[example.db_id]}?mode=ro", uri=True)
        try:
            result, deduped = selector.run_selection(
                candidates, outcomes, example, linked, schema, db, mcs_fewshot,
                ctx.gateway, ctx.config,
            )
        finally:
            db.close()
        _write_json(
            selection_dir / f"{example.example_id}.json",
            {
                "example_id": example.example_id,
                "pool_sizes": list(result.pool_sizes),
                "groups": [
                    {
                        "fingerprint": c.outcome.fingerprint.digest,
                        "confidence": c.confidence,
                        "exec_time_ms": c.outcome.exec_time_ms,
                        "sql": c.query.sql,
                        "prompt_index": c.query.prompt_index,
                        "sample_index": c.query.sample_index,
                    }
                    for c in deduped
                ],
                "vote_tally": result.vote_tally,
                "fallback_reason": result.fallback_reason,
                "mcs_choices": result.mcs_choices,
                "error": result.error,
                "final_sql": result.final_sql,
            },
        )
        return example.example_id, result.final_sql, result.fallback_reason

    totals = {"empty_pool": 0, "no_vote_match": 0, "below_threshold_fallback": 0, "single_candidate": 0}
    predictions: dict[str, str | None] = {}
    for example_id, final_sql, fallback_reason in _map_examples(ctx, _one):
        predictions[example_id] = final_sql
        if fallback_reason:
            totals[fallback_reason] = totals.get(fallback_reason, 0) + 1
    _write_json(predictions_path, predictions)
    _write_official_predictions(ctx, predictions, tag)
    if tag is None:
        ctx.manifest.mark_complete("select", totals, ctx.run_dir)
    return totals


def _write_official_predictions(
    ctx: RunContext, predictions: dict[str, str | None], tag: str | None
) -> None:
    """BIRD-style prediction JSON plus a one-SQL-per-line file."""
    suffix = f"_{tag}" if tag else ""
    bird = {
        e.example_id: f"{predictions.get(e.example_id) or ''}\t----- bird -----\t{e.db_id}"
        for e in ctx.examples
    }
    _write_json(ctx.run_dir / f"predict_{ctx.split}{suffix}.json", bird)
    lines = [(predictions.get(e.example_id) or "SELECT 1").replace("\n", " ") for e in ctx.examples]
    path = ctx.run_dir / f"predictions_{ctx.split}{suffix}.sql"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_eval(ctx: RunContext, tag: str | None = None) -> evaluate.EvalReport:
    _, predictions_path = _selection_dirs(ctx, tag)
    if not predictions_path.is_file():
        raise StagePrerequisiteError("eval requires a completed select stage")
    predictions = json.loads(predictions_path.read_text(encoding="utf-8"))
    linked_schemas = load_linked_schemas(ctx) if ctx.manifest.is_complete("link") else None
    eval_report = evaluate.build_report(
        predictions,
        ctx.examples,
        ctx.db_paths,
        ctx.config,
        linked_schemas=linked_schemas,
        schemas=ctx.schemas,
    )
    suffix = f"_{tag}" if tag else ""
    report.write_report_files(eval_report, ctx.run_dir / f"report{suffix}")
    if tag is None:
        ctx.manifest.mark_complete(
            "eval",
            {"ex_overall": eval_report.ex_overall, "unanswered": eval_report.unanswered},
            ctx.run_dir,
        )
    return eval_report


_STAGE_FUNCS = {
    "link": stage_link,
    "generate": stage_generate,
    "select": stage_select,
    "eval": stage_eval,
}


def run_stage(ctx: RunContext, stage: str, tag: str | None = None):
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    if stage in ("select", "eval"):
        return _STAGE_FUNCS[stage](ctx, tag)
    return _STAGE_FUNCS[stage](ctx)


def run_all(ctx: RunContext, resume: bool = False) -> evaluate.EvalReport:
    """link -> generate -> select -> eval, skipping completed stages on resume."""
    for stage in ("link", "generate", "select"):
        if resume and ctx.manifest.is_complete(stage):
            continue
        run_stage(ctx, stage)
    return stage_eval(ctx)
