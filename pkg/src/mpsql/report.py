"""Evaluation report output: text table, JSON, per-example CSV, and figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluate import DIFFICULTY_ORDER, EvalReport

REPORT_SCHEMA_VERSION = 1

_FIG_KWARGS = {"dpi": 150, "metadata": {"Software": None}}  # keep PNG bytes run-stable


def report_to_dict(report: EvalReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "ex_overall": report.ex_overall,
        "ex_by_difficulty": report.ex_by_difficulty,
        "ves": report.ves,
        "linking_table_recall": report.linking_table_recall,
        "linking_column_recall": report.linking_column_recall,
        "counts": report.counts,
        "unanswered": report.unanswered,
        "gold_errors": report.gold_errors,
    }


def render_text_report(report: EvalReport) -> str:
    lines = [
        "metric                      value",
        "--------------------------  -----",
        f"execution accuracy (EX)     {report.ex_overall:6.2f}",
        f"valid efficiency (VES)      {report.ves:6.2f}",
    ]
    if report.linking_table_recall is not None:
        lines.append(f"table linking recall        {report.linking_table_recall:6.2f}")
    if report.linking_column_recall is not None:
        lines.append(f"column linking recall       {report.linking_column_recall:6.2f}")
    lines.append(f"unanswered examples         {report.unanswered:6d}")
    lines.append("")
    lines.append("difficulty      n   EX")
    lines.append("------------  ---  -----")
    for difficulty in DIFFICULTY_ORDER:
        if difficulty in report.ex_by_difficulty:
            lines.append(
                f"{difficulty.ljust(12)}  {report.counts[difficulty]:3d}"
                f"  {report.ex_by_difficulty[difficulty]:5.1f}"
            )
    if report.gold_errors:
        lines.append("")
        lines.append("gold execution failures (excluded): " + ", ".join(report.gold_errors))
    return "\n".join(lines) + "\n"


def write_per_example_csv(report: EvalReport, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "example_id",
                "db_id",
                "difficulty",
                "match",
                "reward",
                "unanswered",
                "gold_error",
                "prediction_error",
                "predicted_sql",
            ]
        )
        for v in report.per_example:
            writer.writerow(
                [
                    v.example_id,
                    v.db_id,
                    v.difficulty,
                    int(v.match),
                    f"{v.reward:.6f}",
                    int(v.unanswered),
                    v.gold_error or "",
                    v.prediction_error or "",
                    v.predicted_sql or "",
                ]
            )


def render_figures(report: EvalReport, fig_dir: Path) -> list[Path]:
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    difficulties = [d for d in DIFFICULTY_ORDER if d in report.ex_by_difficulty]
    if difficulties:
        fig, ax = plt.subplots(figsize=(7, 4))
        values = [report.ex_by_difficulty[d] for d in difficulties]
        ax.bar(difficulties, values, color="#4878cf")
        ax.axhline(report.ex_overall, color="#d65f5f", linestyle="--", linewidth=1,
                   label=f"overall {report.ex_overall:.1f}")
        ax.set_ylabel("execution accuracy (%)")
        ax.set_ylim(0, 105)
        ax.set_title("Execution accuracy by difficulty")
        ax.legend()
        fig.autofmt_xdate(rotation=30)
        path = fig_dir / "ex_by_difficulty.png"
        fig.savefig(path, **_FIG_KWARGS)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["EX", "VES"]
    values = [report.ex_overall, report.ves]
    if report.linking_table_recall is not None:
        labels.append("table recall")
        values.append(report.linking_table_recall)
    if report.linking_column_recall is not None:
        labels.append("column recall")
        values.append(report.linking_column_recall)
    ax.bar(labels, values, color=["#4878cf", "#6acc65", "#d5bb67", "#956cb4"][: len(labels)])
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.set_title("Run summary")
    path = fig_dir / "summary.png"
    fig.savefig(path, **_FIG_KWARGS)
    plt.close(fig)
    written.append(path)
    return written


def write_report_files(report: EvalReport, out_dir: Path | str) -> list[Path]:
    """Write report.json / report.txt / per_example.csv plus figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    text_path = out_dir / "report.txt"
    text_path.write_text(render_text_report(report), encoding="utf-8")
    csv_path = out_dir / "per_example.csv"
    write_per_example_csv(report, csv_path)
    written = [json_path, text_path, csv_path]
    written.extend(render_figures(report, out_dir / "figures"))
    return written
