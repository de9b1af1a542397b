"""Chat-completion and embedding access with content-addressed caching.

Two backends sit behind one gateway: an OpenAI-compatible HTTP client for
live runs, and the on-disk cache itself, which doubles as a replay fixture
store so full pipeline runs are bit-deterministic offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import tarfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

CACHE_FORMAT_VERSION = 1


class GatewayError(Exception):
    """Backend unavailable or failing after bounded retries."""


class FixtureMissingError(GatewayError):
    """Replay store has no entry for the request hash."""

    def __init__(self, key: str, tag: str):
        super().__init__(f"no replay fixture for request {key} (tag={tag or 'untagged'})")
        self.key = key
        self.tag = tag


class JsonAnswerError(Exception):
    """Completion text did not contain a usable JSON object."""

    def __init__(self, reason: str, text: str):
        super().__init__(reason)
        self.text = text


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    n: int = 1
    temperature: float = 0.0
    max_output_tokens: int = 1024
    tag: str = ""
    meta: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class LlmCompletion:
    raw_text: str
    parsed: dict | None = None
    parse_error: str | None = None

    def ensure_parsed(self, required_fields: Sequence[str]) -> LlmCompletion:
        """Populate exactly one of parsed / parse_error and return self."""
        try:
            self.parsed = parse_json_answer(self.raw_text, required_fields)
            self.parse_error = None
        except JsonAnswerError as exc:
            self.parsed = None
            self.parse_error = str(exc)
        return self


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.values)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> EmbeddingVector:
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls(tuple(v / norm for v in values))

    def dot(self, other: EmbeddingVector) -> float:
        return sum(a * b for a, b in zip(self.values, other.values))


_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")


def _first_json_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    return None


def parse_json_answer(text: str, required_fields: Sequence[str]) -> dict:
    """Extract the first JSON object in text, tolerating prose and code fences.

    Succeeds iff every required field is present; trailing commas (a common
    artifact of the answer skeleton) are repaired before giving up.
    """
    obj = _first_json_object(text)
    if obj is None:
        obj = _first_json_object(_TRAILING_COMMA_RE.sub(r"\1", text))
    if obj is None:
        raise JsonAnswerError("no JSON object found", text)
    missing = [f for f in required_fields if f not in obj]
    if missing:
        raise JsonAnswerError(f"JSON object missing fields: {', '.join(missing)}", text)
    return obj


def chat_request_key(model: str, request: LlmRequest) -> str:
    payload = {
        "kind": "chat",
        "model": model,
        "prompt": request.prompt,
        "n": request.n,
        "temperature": request.temperature,
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


def embedding_request_key(model: str, text: str) -> str:
    payload = {"kind": "embedding", "model": model, "text": text}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


class ResponseCache:
    """Content-addressed store: one JSON file per request hash.

    Entries carry the request metadata beside the payload so bundles are
    auditable and `cache stats` can aggregate per stage tag. Writes are
    write-temp-then-rename, safe under concurrent workers.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None  # corrupt entries behave as misses; stats() reports them

    def put(self, key: str, entry: dict) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        data = json.dumps(entry, sort_keys=True, ensure_ascii=False, indent=1)
        with self._lock:
            tmp.write_text(data, encoding="utf-8")
            tmp.replace(path)

    def entries(self):
        for path in sorted(self.root.glob("*.json")):
            try:
                yield path, json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                yield path, None

    def stats(self) -> dict:
        per_tag: dict[str, dict[str, int]] = {}
        corrupt = 0
        for path, entry in self.entries():
            if entry is None:
                corrupt += 1
                continue
            tag = entry.get("tag") or "untagged"
            bucket = per_tag.setdefault(tag, {"entries": 0, "bytes": 0})
            bucket["entries"] += 1
            bucket["bytes"] += path.stat().st_size
        return {"tags": per_tag, "corrupt": corrupt}

    def prune(self, tag: str) -> int:
        removed = 0
        for path, entry in list(self.entries()):
            if entry is not None and (entry.get("tag") or "untagged") == tag:
                path.unlink()
                removed += 1
        return removed

    def export_bundle(self, bundle: Path | str) -> int:
        bundle = Path(bundle)
        bundle.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with tarfile.open(bundle, "w:gz") as tar:
            for path in sorted(self.root.glob("*.json")):
                tar.add(path, arcname=path.name)
                count += 1
        return count

    def import_bundle(self, bundle: Path | str) -> tuple[int, int]:
        """Extract entries; returns (imported, skipped_corrupt)."""
        imported = skipped = 0
        with tarfile.open(Path(bundle), "r:gz") as tar:
            for member in tar.getmembers():
                if not member.name.endswith(".json"):
                    continue
                handle = tar.extractfile(member)
                if handle is None:
                    continue
                raw = handle.read()
                try:
                    json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError):
                    skipped += 1
                    continue
                (self.root / Path(member.name).name).write_bytes(raw)
                imported += 1
        return imported, skipped


class Backend(Protocol):
    def complete(self, model: str, request: LlmRequest) -> list[str]: ...

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]: ...


class HttpBackend:
    """OpenAI-compatible chat-completions and embeddings client."""

    RETRYABLE = {429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        api_key: str,
        timeout_s: float = 120.0,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        transport=None,
    ):
        import httpx

        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout_s,
            transport=transport,
        )
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    return response.json()
                last_error = GatewayError(f"{path}: HTTP {response.status_code}")
                if response.status_code not in self.RETRYABLE:
                    break
            if attempt + 1 < self.max_attempts:
                self._sleep(self.backoff_s * (2**attempt))
        raise GatewayError(f"backend failed after {self.max_attempts} attempts: {last_error}")

    def complete(self, model: str, request: LlmRequest) -> list[str]:
        data = self._post(
            "/chat/completions",
            {
                "model": model,
                "messages": [{"role": "user", "content": request.prompt}],
                "n": request.n,
                "temperature": request.temperature,
                "max_tokens": request.max_output_tokens,
            },
        )
        return [choice["message"]["content"] or "" for choice in data.get("choices", [])]

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        items = sorted(data.get("data", []), key=lambda d: d.get("index", 0))
        return [item["embedding"] for item in items]


class LlmGateway:
    """Uniform completion/embedding access with caching and replay.

    Modes: `live` queries the backend on cache misses and records every
    response; `replay` prefers the cache and only falls through to a backend
    when one is configured (useful while recording fixtures incrementally);
    `strict_replay` never touches a backend and raises on any miss.
    """

    def __init__(
        self,
        cache: ResponseCache,
        backend: Backend | None = None,
        mode: str = "strict_replay",
        chat_model: str = "gpt-4",
        embed_model: str = "text-embedding-ada-002",
        max_in_flight: int = 4,
    ):
        if mode not in ("live", "replay", "strict_replay"):
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode == "live" and backend is None:
            raise GatewayError("live mode requires a configured backend")
        self.cache = cache
        self.backend = backend
        self.mode = mode
        self.chat_model = chat_model
        self.embed_model = embed_model
        self._sem = threading.Semaphore(max_in_flight)
        self._counter_lock = threading.Lock()
        self.backend_calls = 0

    def _count_backend_call(self) -> None:
        with self._counter_lock:
            self.backend_calls += 1

    def _use_backend_on_miss(self) -> bool:
        return self.mode == "live" or (self.mode == "replay" and self.backend is not None)

    def complete(self, request: LlmRequest) -> list[LlmCompletion]:
        key = chat_request_key(self.chat_model, request)
        entry = self.cache.get(key)
        if entry is not None:
            return [LlmCompletion(text) for text in entry["completions"]]
        if not self._use_backend_on_miss():
            raise FixtureMissingError(key, request.tag)
        with self._sem:
            self._count_backend_call()
            texts = self.backend.complete(self.chat_model, request)
        texts = texts[: request.n]
        self.cache.put(
            key,
            {
                "version": CACHE_FORMAT_VERSION,
                "kind": "chat",
                "model": self.chat_model,
                "tag": request.tag,
                "request": {
                    "prompt": request.prompt,
                    "n": request.n,
                    "temperature": request.temperature,
                    "max_output_tokens": request.max_output_tokens,
                },
                "completions": texts,
            },
        )
        return [LlmCompletion(text) for text in texts]

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("embed requires at least one text")
        keys = [embedding_request_key(self.embed_model, t) for t in texts]
        vectors: dict[int, list[float]] = {}
        missing: list[int] = []
        for i, key in enumerate(keys):
            entry = self.cache.get(key)
            if entry is not None:
                vectors[i] = entry["vector"]
            else:
                missing.append(i)
        if missing:
            if not self._use_backend_on_miss():
                raise FixtureMissingError(keys[missing[0]], "embedding")
            with self._sem:
                self._count_backend_call()
                fetched = self.backend.embed(self.embed_model, [texts[i] for i in missing])
            if len(fetched) != len(missing):
                raise GatewayError("embedding backend returned wrong batch size")
            for i, vec in zip(missing, fetched):
                vectors[i] = list(vec)
                self.cache.put(
                    keys[i],
                    {
                        "version": CACHE_FORMAT_VERSION,
                        "kind": "embedding",
                        "model": self.embed_model,
                        "tag": "embedding",
                        "request": {"text": texts[i]},
                        "vector": vectors[i],
                    },
                )
        return [EmbeddingVector.from_values(vectors[i]) for i in range(len(texts))]
