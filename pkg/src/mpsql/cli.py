"""Command-line front end: run, stage, cache, version.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 backend failure budget exceeded.
"""

from __future__ import annotations

import datetime as _dt
import sys
from pathlib import Path

import click

from . import __version__
from .benchdata import BenchmarkLoadError
from .config import ConfigError, RunConfig, parse_override
from .gateway import GatewayError, ResponseCache
from .pipeline import (
    PipelineError,
    StagePrerequisiteError,
    init_run,
    open_run,
    run_all,
    run_stage,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class BackendBudgetError(Exception):
    pass


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    overrides = {}
    for pair in pairs:
        key, value = parse_override(pair)
        overrides[key] = value
    return overrides


@click.group()
def cli() -> None:
    """Multi-prompt text-to-SQL pipeline."""


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="dev", show_default=True)
@click.option("--run-dir", type=click.Path(file_okay=False), default=None,
              help="Artifact directory; default is a timestamped directory under runs_dir.")
@click.option("--example-id", "example_ids", multiple=True, help="Restrict to specific examples.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Config override (highest precedence).")
@click.option("--resume", is_flag=True, help="Continue an existing run directory from its last completed stage.")
def run(config_path, split, run_dir, example_ids, overrides, resume) -> None:
    """Execute the full pipeline: link, generate, select, eval."""
    override_map = _parse_overrides(overrides)
    if resume:
        if run_dir is None:
            raise ConfigError("--resume requires --run-dir")
        ctx = open_run(run_dir, override_map or None)
    else:
        config = RunConfig.from_file(config_path, override_map)
        if run_dir is None:
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
            run_dir = str(Path(config.runs_dir) / f"run-{stamp}")
        ctx = init_run(config, split, run_dir, list(example_ids) or None)
    report = run_all(ctx, resume=resume)
    click.echo(f"run directory: {ctx.run_dir}")
    click.echo(f"EX {report.ex_overall:.2f} | VES {report.ves:.2f} | unanswered {report.unanswered}")
    total = len(ctx.examples)
    if total and 100.0 * report.unanswered / total > ctx.config.max_unanswered_pct:
        raise BackendBudgetError(
            f"{report.unanswered}/{total} examples unanswered exceeds "
            f"max_unanswered_pct={ctx.config.max_unanswered_pct}"
        )


@cli.command()
@click.argument("stage", type=click.Choice(["link", "generate", "select", "eval"]))
@click.option("--run-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Config override for this stage (e.g. T=0.5 on select).")
@click.option("--tag", default=None,
              help="Suffix for select/eval outputs so reruns do not clobber earlier ones.")
def stage(stage, run_dir, overrides, tag) -> None:
    """Run exactly one stage from the stored artifacts of a run."""
    override_map = _parse_overrides(overrides)
    ctx = open_run(run_dir, override_map or None)
    result = run_stage(ctx, stage, tag)
    if stage == "eval":
        click.echo(f"EX {result.ex_overall:.2f} | VES {result.ves:.2f}")
    else:
        click.echo(f"{stage} complete: {result}")


@cli.command()
@click.argument("action", type=click.Choice(["stats", "prune", "export", "import"]))
@click.option("--cache-dir", required=True, type=click.Path(file_okay=False))
@click.option("--tag", default=None, help="Stage tag for prune.")
@click.option("--bundle", type=click.Path(dir_okay=False), default=None,
              help="Bundle path for export/import.")
def cache(action, cache_dir, tag, bundle) -> None:
    """Inspect or move the response cache / replay fixture store."""
    cache_path = Path(cache_dir)
    if action in ("stats", "prune", "export") and not cache_path.is_dir():
        raise BenchmarkLoadError(f"cache directory {cache_dir} does not exist")
    store = ResponseCache(cache_path)
    if action == "stats":
        stats = store.stats()
        total_entries = sum(b["entries"] for b in stats["tags"].values())
        total_bytes = sum(b["bytes"] for b in stats["tags"].values())
        click.echo(f"entries: {total_entries}  bytes: {total_bytes}  corrupt: {stats['corrupt']}")
        for tag_name in sorted(stats["tags"]):
            bucket = stats["tags"][tag_name]
            click.echo(f"  {tag_name}: {bucket['entries']} entries, {bucket['bytes']} bytes")
    elif action == "prune":
        if not tag:
            raise ConfigError("prune requires --tag")
        click.echo(f"removed {store.prune(tag)} entries tagged {tag!r}")
    elif action == "export":
        if not bundle:
            raise ConfigError("export requires --bundle")
        click.echo(f"exported {store.export_bundle(bundle)} entries to {bundle}")
    else:
        if not bundle:
            raise ConfigError("import requires --bundle")
        imported, skipped = store.import_bundle(bundle)
        click.echo(f"imported {imported} entries ({skipped} corrupt skipped)")


@cli.command()
def version() -> None:
    click.echo(f"mpsql {__version__}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except click.Abort:
        return EXIT_USAGE
    except (click.UsageError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (BenchmarkLoadError, StagePrerequisiteError, PipelineError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (GatewayError, BackendBudgetError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_BACKEND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
