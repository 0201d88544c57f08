# cartlab/backend.py
"""
Completion backends: every source of nondeterminism sits behind `complete()`.

- MockBackend: digest table, fixed script, responder function or seeded choices
- CassetteBackend: record/replay wrapper keyed by request digest
- HTTPBackend: OpenAI-compatible chat completions via AsyncOpenAI
"""

import asyncio
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from .errors import CartlabError

logger = logging.getLogger(__name__)

ENV_BASE_URL = "CARTLAB_BASE_URL"
ENV_API_KEY = "CARTLAB_API_KEY"
ENV_MODEL = "CARTLAB_MODEL"


class BackendError(CartlabError):
    """Network, auth or provider failure."""
    pass


class ReplayMiss(BackendError):
    """Strict replay found no recording for a request digest."""
    pass


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    stop: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens, "stop": list(self.stop)}


@dataclass(frozen=True)
class CompletionRequest:
    messages: Tuple[Tuple[str, str], ...]
    params: CompletionParams = field(default_factory=CompletionParams)

    @property
    def digest(self) -> str:
        """SHA-256 over canonical JSON of messages and params."""
        payload = {
            "messages": [[role, text] for role, text in self.messages],
            "params": self.params.to_dict(),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def user(cls, text: str, **params) -> "CompletionRequest":
        return cls(messages=(("user", text),), params=CompletionParams(**params))


class Backend(Protocol):
    async def complete(self, request: CompletionRequest) -> str:
        ...


# ---------------------------------------------------------------------------
# Failure classification
# ---------------------------------------------------------------------------

class FailureType(Enum):
    TRANSIENT = "transient"
    FUNDAMENTAL = "fundamental"


_TRANSIENT_KEYWORDS = ("timeout", "timed out", "rate limit", "temporarily", "connection", "overloaded", "try again")
_FUNDAMENTAL_KEYWORDS = ("unauthorized", "invalid api key", "permission", "not found", "bad request", "invalid")


def classify_failure(error: Exception) -> FailureType:
    """
    Transient: connection errors, timeouts, rate limits, 5xx.
    Fundamental: auth, bad requests, anything else with a 4xx status.
    """
    try:
        import openai
    except ImportError:  # pragma: no cover
        openai = None

    if openai is not None:
        if isinstance(error, (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError)):
            return FailureType.TRANSIENT
        if isinstance(error, openai.APIStatusError):
            return FailureType.TRANSIENT if error.status_code >= 500 else FailureType.FUNDAMENTAL

    if isinstance(error, (asyncio.TimeoutError, ConnectionError)):
        return FailureType.TRANSIENT
    message = str(error).lower()
    if any(kw in message for kw in _TRANSIENT_KEYWORDS):
        return FailureType.TRANSIENT
    return FailureType.FUNDAMENTAL


# ---------------------------------------------------------------------------
# Mock
# ---------------------------------------------------------------------------

class MockBackend:
    """
    Deterministic offline backend.

    Resolution order: digest table, then the script (consumed in order),
    then `responder(request)`, then a seeded pick from `choices`.
    """

    def __init__(
        self,
        table: Optional[Mapping[str, str]] = None,
        script: Optional[Iterable[str]] = None,
        responder: Optional[Callable[[CompletionRequest], str]] = None,
        choices: Optional[Sequence[str]] = None,
        seed: int = 0,
    ):
        self.table = dict(table or {})
        self.script = list(script or [])
        self.responder = responder
        self.choices = list(choices or [])
        self.rng = random.Random(seed)
        self.calls = 0
        self.requests: List[CompletionRequest] = []

    async def complete(self, request: CompletionRequest) -> str:
        self.calls += 1
        self.requests.append(request)
        digest = request.digest
        if digest in self.table:
            return self.table[digest]
        if self.script:
            return self.script.pop(0)
        if self.responder is not None:
            return self.responder(request)
        if self.choices:
            return self.rng.choice(self.choices)
        raise BackendError(f"mock backend has no response for digest {digest[:12]}")


# ---------------------------------------------------------------------------
# Cassette
# ---------------------------------------------------------------------------

CASSETTE_MODES = ("record", "replay", "strict")


def load_cassette(path: Union[str, Path]) -> Dict[str, str]:
    """Read a cassette: JSON-lines of {digest, response}; a JSON list of pairs is also accepted."""
    path = Path(path)
    if not path.exists():
        return {}
    text = path.read_text()
    entries: Dict[str, str] = {}
    if text.lstrip().startswith("["):
        for row in json.loads(text):
            digest, response = (row["digest"], row["response"]) if isinstance(row, dict) else row
            entries[digest] = response
        return entries
    for line in text.splitlines():
        if line.strip():
            row = json.loads(line)
            entries[row["digest"]] = row["response"]
    return entries


class CassetteBackend:
    """
    Record/replay wrapper.

    record: hits served from the cassette, misses go to `inner` and are saved.
    replay: hits served, misses go to `inner` without saving.
    strict: misses raise ReplayMiss; fully offline.
    """

    def __init__(self, inner: Optional[Backend] = None, path: Optional[Union[str, Path]] = None, mode: str = "strict"):
        if mode not in CASSETTE_MODES:
            raise ValueError(f"cassette mode must be one of {CASSETTE_MODES}, got {mode!r}")
        self.inner = inner
        self.path = Path(path) if path else None
        self.mode = mode
        self.entries: Dict[str, str] = load_cassette(self.path) if self.path else {}
        self.hits = 0
        self.misses = 0
        self._lock = asyncio.Lock()

    async def complete(self, request: CompletionRequest) -> str:
        digest = request.digest
        if digest in self.entries:
            self.hits += 1
            return self.entries[digest]
        self.misses += 1
        if self.mode == "strict" or self.inner is None:
            raise ReplayMiss(f"no recording for request {digest[:12]}")
        response = await self.inner.complete(request)
        if self.mode == "record":
            async with self._lock:
                if digest not in self.entries:
                    self.entries[digest] = response
                    self._append(digest, response)
        return response

    def _append(self, digest: str, response: str) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as f:
            f.write(json.dumps({"digest": digest, "response": response}) + "\n")


# ---------------------------------------------------------------------------
# HTTP
# ---------------------------------------------------------------------------

class HTTPBackend:
    """
    OpenAI-compatible chat completions.

    Endpoint, key and model come from CARTLAB_BASE_URL / CARTLAB_API_KEY /
    CARTLAB_MODEL unless passed explicitly. The client's own retries are
    disabled; transient failures are retried here with exponential backoff.
    """

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: Optional[str] = None,
        max_in_flight: int = 4,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        client=None,
    ):
        self.model = model or os.getenv(ENV_MODEL) or "gpt-4o-mini"
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.max_in_flight = max_in_flight
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

        if client is None:
            from openai import AsyncOpenAI

            api_key = api_key or os.getenv(ENV_API_KEY)
            if not api_key:
                raise BackendError(f"{ENV_API_KEY} is not set")
            client = AsyncOpenAI(
                base_url=base_url or os.getenv(ENV_BASE_URL) or None,
                api_key=api_key,
                max_retries=0,
                timeout=timeout,
            )
        self.client = client

    async def complete(self, request: CompletionRequest) -> str:
        async with self._semaphore:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                return await self._complete_with_retry(request)
            finally:
                self.in_flight -= 1

    async def _complete_with_retry(self, request: CompletionRequest) -> str:
        kwargs = {
            "model": self.model,
            "messages": [{"role": role, "content": text} for role, text in request.messages],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }
        if request.params.stop:
            kwargs["stop"] = list(request.params.stop)

        for attempt in range(self.max_retries + 1):
            self.calls += 1
            try:
                response = await self.client.chat.completions.create(**kwargs)
                return response.choices[0].message.content or ""
            except Exception as e:
                failure = classify_failure(e)
                if failure is FailureType.FUNDAMENTAL:
                    raise BackendError(f"completion failed: {e}") from e
                if attempt == self.max_retries:
                    raise BackendError(f"completion failed after {attempt + 1} attempts: {e}") from e
                delay = self.backoff_base * (2 ** attempt)
                logger.warning("[Backend] transient failure (attempt %d/%d), retrying in %.2fs: %s",
                               attempt + 1, self.max_retries + 1, delay, e)
                await asyncio.sleep(delay)
        raise BackendError("unreachable")  # pragma: no cover


def build_backend(kind: str = "mock", cassette: Optional[Union[str, Path]] = None, mode: str = "strict", **http_kwargs) -> Backend:
    """Backend from run configuration: mock | http | cassette (optionally wrapping http)."""
    if kind == "mock":
        inner: Backend = MockBackend()
    elif kind in ("http", "cassette"):
        inner = HTTPBackend(**http_kwargs) if (kind == "http" or mode != "strict") else None
    else:
        raise ValueError(f"unknown backend kind: {kind}")
    if cassette is not None or kind == "cassette":
        return CassetteBackend(inner, cassette, mode)
    return inner
