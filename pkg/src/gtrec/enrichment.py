"""Geo-temporal context generation: prompts, providers, parsing and caching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .errors import MalformedResponse, ProviderExhausted, SchemaError, UnknownTemplate

logger = logging.getLogger(__name__)

MAX_SUMMARY_CHARS = 2000
DEFAULT_TEMPLATE = "v1"

TEMPLATES = {
    "v1": (
        "You help a recommender system understand the moment in which a user is active.\n"
        "The user consumed content at this time and place:\n"
        "- UTC time: {timestamp}\n"
        "- Location: {location}\n"
        "Return two things:\n"
        "1. events: real-world happenings in or relevant to this location in the days just "
        "before this time (holidays, cultural celebrations, sports, politics, entertainment "
        "releases, fashion, notable people, major social events).\n"
        "2. summary: two or three sentences on the wider seasonal and regional context and how "
        "it could shape what the user wants to watch or hear.\n"
        'Reply with valid JSON only, shaped as {{"events": [string, ...], "summary": string}}.'
    ),
}


# ---------------------------------------------------------------- keys


def iso_utc(ts: int | float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def bucket_of(ts: int | float, granularity: str = "day") -> str:
    """Calendar bucket of a UTC timestamp: ``YYYY-MM-DD`` or ISO week ``YYYY-Www``."""
    d = datetime.fromtimestamp(ts, tz=timezone.utc)
    if granularity == "day":
        return d.strftime("%Y-%m-%d")
    if granularity == "week":
        year, week, _ = d.isocalendar()
        return f"{year}-W{week:02d}"
    raise ValueError(f"unknown bucket granularity {granularity!r}")


def bucket_start(bucket: str) -> int:
    """UTC timestamp at the start of a bucket (noon for day buckets)."""
    if "-W" in bucket:
        d = datetime.strptime(bucket + "-1", "%G-W%V-%u").replace(tzinfo=timezone.utc)
    else:
        d = datetime.strptime(bucket, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(d.timestamp()) + 12 * 3600


def context_key(bucket: str, location: str) -> str:
    """String key used for context rows in embedding files."""
    return f"{bucket}|{location}"


def split_context_key(key: str) -> tuple[str, str]:
    bucket, _, location = key.partition("|")
    return bucket, location


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class PromptRequest:
    timestamp_utc: int
    location: str
    template_version: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if not isinstance(self.location, str) or not self.location.strip():
            raise ValueError("PromptRequest.location must be non-empty")
        if self.template_version not in TEMPLATES:
            raise UnknownTemplate(self.template_version)


@dataclass(frozen=True)
class GeoTemporalContext:
    events: tuple[str, ...]
    summary: str
    source_key: tuple[str, str] | None = None
    provider_id: str = ""

    def __post_init__(self):
        if not self.summary.strip():
            raise SchemaError("summary must be non-empty")
        if len(self.summary) > MAX_SUMMARY_CHARS:
            raise SchemaError(f"summary longer than {MAX_SUMMARY_CHARS} characters")

    def text(self) -> str:
        """Events joined with the summary; this is what gets embedded."""
        return " ".join([*self.events, self.summary])

    def to_json(self) -> str:
        return json.dumps({"events": list(self.events), "summary": self.summary}, ensure_ascii=False)


def build_prompt(req: PromptRequest) -> str:
    try:
        template = TEMPLATES[req.template_version]
    except KeyError:
        raise UnknownTemplate(req.template_version) from None
    return template.format(timestamp=iso_utc(req.timestamp_utc), location=req.location)


_FENCE = re.compile(r"```(?:[A-Za-z0-9_-]+)?\s*(.*?)```", re.DOTALL)


def parse_context_response(
    raw: str, source_key: tuple[str, str] | None = None, provider_id: str = ""
) -> GeoTemporalContext:
    """Turn an LLM reply into a context, stripping markdown fences first."""
    m = _FENCE.search(raw)
    body = m.group(1) if m else raw
    try:
        obj = json.loads(body.strip())
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedResponse(f"reply is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedResponse("reply JSON is not an object")
    if "events" not in obj or "summary" not in obj:
        missing = [k for k in ("events", "summary") if k not in obj]
        raise SchemaError(f"missing field(s): {missing}")

    events = obj["events"]
    if events is None:
        events = []
    elif isinstance(events, (str, int, float)):
        events = [events]
    elif isinstance(events, dict):
        events = list(events.values())
    events = tuple(s for s in (str(e).strip() for e in events) if s)

    summary = obj["summary"]
    if isinstance(summary, list):
        summary = " ".join(str(s) for s in summary)
    summary = "" if summary is None else str(summary).strip()
    if not summary:
        raise SchemaError("summary is empty")
    return GeoTemporalContext(events, summary[:MAX_SUMMARY_CHARS], source_key, provider_id)


# ---------------------------------------------------------------- providers


class Provider(Protocol):
    provider_id: str

    def complete(self, prompt: str) -> str: ...


_PROMPT_TIME = re.compile(r"UTC time: (\S+)")
_PROMPT_LOC = re.compile(r"Location: (.+)")

_MOCK_OCCASIONS = [
    "harvest festival", "film premiere weekend", "school holidays", "regional election",
    "music awards night", "marathon", "heatwave", "first snowfall", "football final",
    "food fair", "art biennale", "tech expo", "national holiday", "street parade",
    "fashion week", "book fair", "jazz festival", "county fair", "storm warning",
    "charity gala",
]
_MOCK_MOODS = [
    "relaxed", "festive", "busy", "nostalgic", "adventurous", "quiet", "competitive",
    "romantic", "curious", "family-oriented",
]


class MockProvider:
    """Deterministic offline provider keyed on (day, location) parsed from the prompt."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.provider_id = f"mock:{seed}"
        self.calls = 0

    def _digest(self, *parts: str) -> bytes:
        h = hashlib.blake2b(digest_size=32, key=str(self.seed).encode())
        for p in parts:
            h.update(p.encode("utf-8"))
            h.update(b"\x00")
        return h.digest()

    def complete(self, prompt: str) -> str:
        self.calls += 1
        t, loc = _PROMPT_TIME.search(prompt), _PROMPT_LOC.search(prompt)
        if not t or not loc:
            return "I can only answer prompts that state a UTC time and a location."
        day, location = t.group(1)[:10], loc.group(1).strip()
        d = self._digest(day, location)
        n_events = 1 + d[0] % 3
        events = [
            f"{_MOCK_OCCASIONS[d[1 + i] % len(_MOCK_OCCASIONS)]} near {location} "
            f"(ref {d[8 + i]:02x}{d[12 + i]:02x})"
            for i in range(n_events)
        ]
        mood = _MOCK_MOODS[d[20] % len(_MOCK_MOODS)]
        summary = (
            f"Around {day} the mood in {location} is {mood}. "
            f"Audiences may lean toward {mood} content."
        )
        return json.dumps({"events": events, "summary": summary})


class HTTPProvider:
    """OpenAI-compatible chat-completions endpoint.

    Reads ``GTREC_LLM_ENDPOINT``, ``GTREC_LLM_API_KEY`` and ``GTREC_LLM_MODEL``
    from the environment unless given explicitly.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("GTREC_LLM_ENDPOINT")
        if not self.endpoint:
            raise ValueError("no endpoint configured (set GTREC_LLM_ENDPOINT)")
        self.api_key = api_key or os.environ.get("GTREC_LLM_API_KEY", "")
        self.model = model or os.environ.get("GTREC_LLM_MODEL", "default")
        self.timeout = timeout
        self.provider_id = f"http:{self.model}"

    def complete(self, prompt: str) -> str:
        payload = json.dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }).encode()
        req = urllib.request.Request(self.endpoint, data=payload, method="POST")
        req.add_header("Content-Type", "application/json")
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        return body["choices"][0]["message"]["content"]


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ReplayProvider:
    """Serves recorded replies (JSONL of ``{"prompt_sha256", "response"}``)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.responses: dict[str, str] = {}
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    self.responses[obj["prompt_sha256"]] = obj["response"]
        self.provider_id = f"replay:{self.path.name}"

    def complete(self, prompt: str) -> str:
        try:
            return self.responses[prompt_digest(prompt)]
        except KeyError:
            raise LookupError("prompt not present in replay file") from None


class RecordingProvider:
    """Wraps a provider and appends every reply to a replay file."""

    def __init__(self, inner: Provider, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.provider_id = inner.provider_id
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        out = self.inner.complete(prompt)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"prompt_sha256": prompt_digest(prompt), "response": out}) + "\n")
        return out


def mock_provider(seed: int = 0) -> MockProvider:
    return MockProvider(seed)


# ---------------------------------------------------------------- cache

CacheKey = tuple[str, str, str]  # (bucket, location, template_version)


class ContextCache:
    """JSONL-backed map of (bucket, location, template) -> context.

    ``put`` is serialized through one lock and appended to the backing file
    immediately; ``save`` rewrites the file in the current entry order.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[CacheKey, GeoTemporalContext] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                key = (obj["bucket"], obj["location"], obj["template_version"])
                self.entries[key] = GeoTemporalContext(
                    tuple(obj["events"]), obj["summary"], key[:2], obj.get("provider_id", "")
                )

    @staticmethod
    def _line(key: CacheKey, ctx: GeoTemporalContext) -> str:
        return json.dumps({
            "bucket": key[0],
            "location": key[1],
            "template_version": key[2],
            "events": list(ctx.events),
            "summary": ctx.summary,
            "provider_id": ctx.provider_id,
        }, ensure_ascii=False) + "\n"

    def get(self, bucket: str, location: str, template_version: str = DEFAULT_TEMPLATE):
        return self.entries.get((bucket, location, template_version))

    def __contains__(self, key: CacheKey) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, key: CacheKey, ctx: GeoTemporalContext) -> None:
        with self._lock:
            self.entries[key] = ctx
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(self._line(key, ctx))

    def save(self, path: str | Path | None = None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("cache has no backing path")
        with self._lock:
            tmp = target.with_suffix(target.suffix + ".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                for key, ctx in self.entries.items():
                    fh.write(self._line(key, ctx))
            os.replace(tmp, target)

    def sort(self) -> None:
        with self._lock:
            self.entries = dict(sorted(self.entries.items()))


# ---------------------------------------------------------------- enrich


def required_keys(log: Iterable, bucket: str = "day") -> list[tuple[str, str]]:
    """Distinct (bucket, location) keys of a log, sorted."""
    return sorted({(bucket_of(x.timestamp_utc, bucket), x.location) for x in log})


def enrich(
    log: Iterable,
    provider: Provider | None,
    cache: ContextCache,
    bucket: str = "day",
    template_version: str = DEFAULT_TEMPLATE,
    max_attempts: int = 3,
    backoff: float = 0.5,
    max_workers: int = 1,
    strict: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[tuple[str, str], GeoTemporalContext]:
    """Fetch one context per distinct (bucket, location) key of ``log``.

    The cache is consulted first. Each missing key gets up to ``max_attempts``
    provider calls with exponential backoff; keys that still fail are misses.
    With ``strict`` any miss raises ProviderExhausted once every key has been
    attempted, otherwise misses are logged and left out of the result.
    """
    keys = required_keys(log, bucket)
    result: dict[tuple[str, str], GeoTemporalContext] = {}
    todo = []
    for b, loc in keys:
        hit = cache.get(b, loc, template_version)
        if hit is not None:
            result[(b, loc)] = hit
        else:
            todo.append((b, loc))

    if todo and provider is None:
        raise ProviderExhausted(todo)

    def fetch(key):
        b, loc = key
        prompt = build_prompt(PromptRequest(bucket_start(b), loc, template_version))
        for attempt in range(max_attempts):
            try:
                raw = provider.complete(prompt)
                ctx = parse_context_response(raw, key, provider.provider_id)
            except Exception as exc:  # provider and parse failures are retried alike
                logger.warning("context %s attempt %d failed: %s", key, attempt + 1, exc)
                if attempt + 1 < max_attempts:
                    sleep(backoff * 2**attempt)
                continue
            cache.put((b, loc, template_version), ctx)
            return key, ctx
        return key, None

    if max_workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            fetched = list(pool.map(fetch, todo))
    else:
        fetched = [fetch(k) for k in todo]

    misses = []
    for key, ctx in fetched:
        if ctx is None:
            misses.append(key)
        else:
            result[key] = ctx
    if misses:
        if strict:
            raise ProviderExhausted(misses)
        logger.warning("%d context key(s) missing after retries", len(misses))
    return dict(sorted(result.items()))
