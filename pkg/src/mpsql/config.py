"""Run configuration: every pipeline hyperparameter with validated defaults.

Precedence is CLI overrides > config file > defaults. The dataclass is the
single serializable source of truth a run manifest snapshots.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(Exception):
    pass


# Short symbols accepted in config files / --set overrides.
_ALIASES = {"T": "threshold"}


@dataclass
class RunConfig:
    # prompt counts and sampling
    p_t: int = 3  # table-linking prompts
    p_c: int = 3  # column-linking prompts
    p_q: int = 5  # generation prompt variants
    n: int = 20  # samples per prompt
    k: int = 20  # few-shot examples per prompt
    threshold: float = 0.2  # confidence threshold T
    temperature: float = 1.0
    max_output_tokens: int = 1024

    # execution
    exec_timeout_ms: int = 180_000
    sample_rows: int = 3
    max_choices: int = 3
    distinct_rows: bool = False
    timing: str = "real"  # or "stub" for deterministic reports
    ves_repeats: int = 3

    # reproducibility and backends
    seed: int = 0
    backend: str = "live"  # live | replay | strict_replay
    chat_model: str = "gpt-4"
    embed_model: str = "text-embedding-ada-002"
    api_base: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"

    # paths and orchestration
    benchmark_root: str = ""
    cache_dir: str = ""
    runs_dir: str = "runs"
    train_split: str = "train"
    workers: int = 4
    gateway_in_flight: int = 4
    fallback_full_schema: bool = True
    max_unanswered_pct: float = 100.0

    def validate(self) -> None:
        problems = []
        for name in ("p_t", "p_c", "p_q", "n", "k"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.p_q > 5:
            problems.append("p_q must be <= 5 (five prompt-variant recipes are defined)")
        if not 0.0 <= self.threshold <= 1.0:
            problems.append("threshold (T) must be in [0, 1]")
        if self.temperature < 0:
            problems.append("temperature must be >= 0")
        if self.exec_timeout_ms <= 0:
            problems.append("exec_timeout_ms must be positive")
        if self.sample_rows < 0:
            problems.append("sample_rows must be >= 0")
        if self.max_choices < 2:
            problems.append("max_choices must be >= 2")
        if self.backend not in ("live", "replay", "strict_replay"):
            problems.append(f"unknown backend {self.backend!r}")
        if self.timing not in ("real", "stub"):
            problems.append(f"unknown timing mode {self.timing!r}")
        if self.workers < 1 or self.gateway_in_flight < 1:
            problems.append("workers and gateway_in_flight must be >= 1")
        if not 0.0 <= self.max_unanswered_pct <= 100.0:
            problems.append("max_unanswered_pct must be in [0, 100]")
        if not self.benchmark_root:
            problems.append("benchmark_root must be set")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_sources(cls, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
        values: dict = {}
        for source in (file_values or {}, overrides or {}):
            for key, value in source.items():
                field_name = _ALIASES.get(key, key)
                if field_name not in cls.field_names():
                    raise ConfigError(f"unknown configuration key {key!r}")
                values[field_name] = value
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Path | str, overrides: dict | None = None) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        # Paths in the file are resolved relative to the file's directory.
        resolved = dict(doc)
        for key in ("benchmark_root", "cache_dir", "runs_dir"):
            if key in resolved and resolved[key] and not Path(resolved[key]).is_absolute():
                resolved[key] = str((path.parent / resolved[key]).resolve())
        return cls.from_sources(resolved, overrides)


def parse_override(text: str) -> tuple[str, object]:
    """Parse a KEY=VALUE CLI override with JSON-style value coercion."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like key=value")
    key = key.strip()
    raw = raw.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
