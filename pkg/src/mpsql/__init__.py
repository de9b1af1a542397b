"""Multi-prompt text-to-SQL: schema linking, candidate generation,
execution-guided selection, and a benchmark evaluation harness."""

__version__ = "0.1.0"
