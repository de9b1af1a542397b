from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from mpsql.cli import EXIT_BACKEND, EXIT_DATA, EXIT_OK, EXIT_USAGE, main

from conftest import DESK_CONFIG


@pytest.fixture
def desk_run(tmp_path):
    """A completed desk-profile run via the CLI."""
    run_dir = tmp_path / "run"
    code = main(["run", "--config", str(DESK_CONFIG), "--split", "dev", "--run-dir", str(run_dir)])
    assert code == EXIT_OK
    return run_dir


def test_version():
    assert main(["version"]) == EXIT_OK


def test_run_produces_report_and_predictions(desk_run):
    assert (desk_run / "report" / "report.json").is_file()
    assert (desk_run / "predictions.json").is_file()
    assert (desk_run / "predict_dev.json").is_file()
    assert (desk_run / "predictions_dev.sql").is_file()
    assert (desk_run / "report" / "figures" / "summary.png").is_file()
    report = json.loads((desk_run / "report" / "report.json").read_text())
    assert 0 <= report["ex_overall"] <= 100


def test_invalid_threshold_fails_before_any_stage(tmp_path):
    run_dir = tmp_path / "never"
    code = main([
        "run", "--config", str(DESK_CONFIG), "--run-dir", str(run_dir), "--set", "T=1.5",
    ])
    assert code == EXIT_USAGE
    assert not (run_dir / "manifest.json").exists()


def test_unknown_config_key_rejected(tmp_path):
    code = main([
        "run", "--config", str(DESK_CONFIG), "--run-dir", str(tmp_path / "x"), "--set", "nope=1",
    ])
    assert code == EXIT_USAGE


def test_missing_benchmark_is_data_error(tmp_path):
    config = json.loads(DESK_CONFIG.read_text())
    config["benchmark_root"] = str(tmp_path / "nowhere")
    config["cache_dir"] = str(Path(DESK_CONFIG.parent / config["cache_dir"]).resolve())
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(config))
    assert main(["run", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == EXIT_DATA


def test_stage_select_resweep_threshold_is_subset(desk_run):
    generate_artifacts = {
        p.name: p.read_bytes() for p in (desk_run / "candidates").glob("*.json")
    }
    code = main(["stage", "select", "--run-dir", str(desk_run), "--set", "T=0.5", "--tag", "t05"])
    assert code == EXIT_OK
    for trace_path in sorted((desk_run / "selection").glob("*.json")):
        strict = json.loads((desk_run / "selection_t05" / trace_path.name).read_text())
        loose = json.loads(trace_path.read_text())
        assert strict["pool_sizes"][3] <= loose["pool_sizes"][3]
    assert (desk_run / "predictions_t05.json").is_file()
    # stage isolation: the select rerun must not touch generate artifacts
    after = {p.name: p.read_bytes() for p in (desk_run / "candidates").glob("*.json")}
    assert after == generate_artifacts


def test_stage_eval_reproduces_run_report(desk_run):
    before = (desk_run / "report" / "report.json").read_bytes()
    assert main(["stage", "eval", "--run-dir", str(desk_run)]) == EXIT_OK
    after = (desk_run / "report" / "report.json").read_bytes()
    assert before == after


def test_stage_order_enforced(tmp_path):
    from mpsql.config import RunConfig
    from mpsql.pipeline import init_run

    run_dir = tmp_path / "fresh"
    init_run(RunConfig.from_file(DESK_CONFIG), "dev", run_dir)
    assert main(["stage", "generate", "--run-dir", str(run_dir)]) == EXIT_DATA
    assert main(["stage", "select", "--run-dir", str(run_dir)]) == EXIT_DATA


def test_resume_skips_completed_link_stage(tmp_path):
    from mpsql.config import RunConfig
    from mpsql.pipeline import init_run, run_stage

    run_dir = tmp_path / "resumable"
    ctx = init_run(RunConfig.from_file(DESK_CONFIG), "dev", run_dir)
    run_stage(ctx, "link")
    stamps = {p.name: p.stat().st_mtime_ns for p in (run_dir / "linked").glob("*.json")}
    code = main(["run", "--config", str(DESK_CONFIG), "--run-dir", str(run_dir), "--resume"])
    assert code == EXIT_OK
    after = {p.name: p.stat().st_mtime_ns for p in (run_dir / "linked").glob("*.json")}
    assert stamps == after  # linked artifacts were not rewritten
    assert (run_dir / "report" / "report.json").is_file()


def test_resume_requires_run_dir():
    assert main(["run", "--config", str(DESK_CONFIG), "--resume"]) == EXIT_USAGE


def test_unanswered_budget_exceeded_is_backend_exit(tmp_path):
    # strip the generation fixtures: every example becomes unanswered, the
    # run itself still completes example by example
    replay_src = Path(DESK_CONFIG.parent, json.loads(DESK_CONFIG.read_text())["cache_dir"]).resolve()
    pruned = tmp_path / "pruned-cache"
    shutil.copytree(replay_src, pruned)
    for entry in pruned.glob("*.json"):
        if json.loads(entry.read_text()).get("tag") == "sql_generation":
            entry.unlink()
    run_dir = tmp_path / "budget"
    code = main([
        "run", "--config", str(DESK_CONFIG), "--run-dir", str(run_dir),
        "--set", f"cache_dir={pruned}", "--set", "max_unanswered_pct=0.0",
    ])
    assert code == EXIT_BACKEND
    predictions = json.loads((run_dir / "predictions.json").read_text())
    assert all(v is None for v in predictions.values())


class TestCacheCommand:
    def test_stats_on_empty_cache(self, tmp_path):
        empty = tmp_path / "empty-cache"
        empty.mkdir()
        assert main(["cache", "stats", "--cache-dir", str(empty)]) == EXIT_OK

    def test_stats_missing_dir_is_data_error(self, tmp_path):
        assert main(["cache", "stats", "--cache-dir", str(tmp_path / "ghost")]) == EXIT_DATA

    def test_prune_requires_tag(self, tmp_path):
        d = tmp_path / "c"
        d.mkdir()
        assert main(["cache", "prune", "--cache-dir", str(d)]) == EXIT_USAGE

    def test_export_import_round_trip(self, tmp_path):
        from mpsql.gateway import LlmRequest, ResponseCache

        from conftest import put_chat_fixture

        src = ResponseCache(tmp_path / "src")
        put_chat_fixture(src, "m", LlmRequest(prompt="a", tag="link"), ["x"])
        put_chat_fixture(src, "m", LlmRequest(prompt="b", tag="gen"), ["y"])
        bundle = tmp_path / "bundle.tar.gz"
        assert main(["cache", "export", "--cache-dir", str(src.root), "--bundle", str(bundle)]) == EXIT_OK
        dest = tmp_path / "dest"
        assert main(["cache", "import", "--cache-dir", str(dest), "--bundle", str(bundle)]) == EXIT_OK
        assert {p.name for p in dest.glob("*.json")} == {p.name for p in src.root.glob("*.json")}

    def test_prune_removes_only_that_tag(self, tmp_path):
        from mpsql.gateway import LlmRequest, ResponseCache

        from conftest import put_chat_fixture

        store = ResponseCache(tmp_path / "c2")
        put_chat_fixture(store, "m", LlmRequest(prompt="a", tag="link"), ["x"])
        put_chat_fixture(store, "m", LlmRequest(prompt="b", tag="gen"), ["y"])
        assert main(["cache", "prune", "--cache-dir", str(store.root), "--tag", "link"]) == EXIT_OK
        remaining = [json.loads(p.read_text())["tag"] for p in store.root.glob("*.json")]
        assert remaining == ["gen"]


def test_example_id_filter(tmp_path):
    run_dir = tmp_path / "filtered"
    code = main([
        "run", "--config", str(DESK_CONFIG), "--run-dir", str(run_dir),
        "--example-id", "tox_002", "--example-id", "tox_003",
    ])
    assert code == EXIT_OK
    predictions = json.loads((run_dir / "predictions.json").read_text())
    assert set(predictions) == {"tox_002", "tox_003"}
