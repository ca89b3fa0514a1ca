"""Chat-completion backends.

``LiveClient`` speaks the OpenAI-compatible ``/chat/completions`` protocol,
``MockClient`` replays fixtures keyed by a request digest, and
``RecordingClient`` captures another client's responses into fixtures.
All of them share the call accounting and bounded-parallel batching of
:class:`ChatClient`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .errors import (
    AuthError,
    BackendError,
    MissingFixtureError,
    RateLimitExhausted,
    SurgforgeError,
    TransportError,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "SURGFORGE_API_KEY"
MESSAGE_ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "error")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")
        for m in self.messages:
            if m.role not in MESSAGE_ROLES:
                raise ValueError(f"unknown role {m.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def digest(self) -> str:
        return request_digest(self)

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    content: str | None
    finish_reason: str = "stop"
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and self.content is None:
            raise ValueError("content required when finish_reason is 'stop'")


def request_digest(request: ChatRequest) -> str:
    """Stable sha256 over model, messages and temperature."""
    payload = {
        "model": request.model,
        "messages": [m.to_dict() for m in request.messages],
        "temperature": float(request.temperature),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ChatClient:
    """Base class: call accounting, usage totals and ordered bounded batching."""

    backend_id = "abstract"

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def _complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        log.debug("request %s tag=%s", request.digest[:12], request.request_tag)
        response = self._complete(request)
        with self._lock:
            self.prompt_tokens += response.usage.prompt_tokens
            self.completion_tokens += response.usage.completion_tokens
        log.debug("response %s finish=%s", request.digest[:12], response.finish_reason)
        return response

    def complete_batch(
        self, requests: Sequence[ChatRequest], max_in_flight: int = 4
    ) -> list[ChatResponse | SurgforgeError]:
        """Responses in request order; a failed request yields its exception at its index."""
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

        def one(req: ChatRequest):
            try:
                return self.complete(req)
            except SurgforgeError as exc:
                return exc

        return parallel_map(one, requests, max_in_flight)


def parallel_map(fn: Callable, items: Sequence, max_workers: int) -> list:
    """``[fn(x) for x in items]`` with at most ``max_workers`` calls outstanding."""
    if not items:
        return []
    if max_workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


# --- live backend --------------------------------------------------------------


@dataclass
class RetryPolicy:
    max_retries: int = 4
    base_delay: float = 0.5
    max_delay: float = 30.0
    jitter: float = 0.25
    seed: int | None = None

    def delays(self) -> list[float]:
        """Backoff schedule: exponential, jittered upward, never decreasing."""
        rng = random.Random(self.seed)
        out: list[float] = []
        for k in range(self.max_retries):
            raw = min(self.max_delay, self.base_delay * 2**k)
            delay = min(self.max_delay, raw * (1 + self.jitter * rng.random()))
            out.append(max(delay, out[-1]) if out else delay)
        return out


class RateLimiter:
    """Minimum interval between request starts, shared across threads."""

    def __init__(self, requests_per_second: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / requests_per_second if requests_per_second else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


class LiveClient(ChatClient):
    """OpenAI-compatible HTTP backend with retries on 429, 5xx and transport errors."""

    backend_id = "live"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        retry: RetryPolicy | None = None,
        requests_per_second: float | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.retry = retry or RetryPolicy()
        self.limiter = RateLimiter(requests_per_second)
        self.sleep = sleep
        self.retries_used = 0
        self.http = httpx.Client(timeout=timeout, transport=transport)

    def _post(self, request: ChatRequest) -> httpx.Response:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return self.http.post(f"{self.base_url}/chat/completions", json=request.body(), headers=headers)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        delays = self.retry.delays()
        attempt = 0
        while True:
            self.limiter.acquire()
            try:
                resp = self._post(request)
            except httpx.HTTPError as exc:
                error: BackendError = TransportError(f"{type(exc).__name__}: {exc}")
            else:
                status = resp.status_code
                if status == 200:
                    return parse_completion(resp)
                body = resp.text[:2000]
                if status in (401, 403):
                    raise AuthError(f"authentication failed ({status})", status, body)
                if status == 429:
                    error = RateLimitExhausted("rate limited", status, body)
                elif status >= 500:
                    error = BackendError(f"server error {status}", status, body)
                else:
                    raise BackendError(f"request rejected ({status})", status, body)
            if attempt >= len(delays):
                raise error
            log.warning("retry %d/%d after %s", attempt + 1, len(delays), error)
            self.sleep(delays[attempt])
            attempt += 1
            with self._lock:
                self.retries_used += 1

    def close(self) -> None:
        self.http.close()


def parse_completion(resp: httpx.Response) -> ChatResponse:
    try:
        data = resp.json()
        choice = data["choices"][0]
        content = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise BackendError("unparseable completion body", resp.status_code, resp.text[:2000]) from None
    finish = choice.get("finish_reason") or "stop"
    if finish not in FINISH_REASONS:
        finish = "stop" if content is not None else "error"
    if finish == "stop" and content is None:
        finish = "error"
    usage = data.get("usage") or {}
    return ChatResponse(
        content=content,
        finish_reason=finish,
        usage=Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
    )


# --- fixtures --------------------------------------------------------------------


class FixtureStore:
    """Directory of ``{digest}.json`` files holding ``{request_tag, content}``."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, digest: str) -> dict | None:
        try:
            with open(self.path(digest), encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def put(self, digest: str, request_tag: str, content: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        target = self.path(digest)
        tmp = target.with_name(target.name + f".{threading.get_ident()}.tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"request_tag": request_tag, "content": content}, fh, ensure_ascii=False, indent=1)
            fh.write("\n")
        os.replace(tmp, target)

    def __len__(self) -> int:
        return len(list(self.root.glob("*.json"))) if self.root.exists() else 0


class MockClient(ChatClient):
    """Replays fixtures by request digest.

    In strict mode an unknown digest raises MissingFixtureError; otherwise
    ``default`` is returned.
    """

    backend_id = "mock"

    def __init__(
        self,
        fixtures: FixtureStore | str | os.PathLike | dict[str, str],
        strict: bool = True,
        default: str = "",
    ) -> None:
        super().__init__()
        if isinstance(fixtures, dict):
            self.store = None
            self.table = dict(fixtures)
        else:
            self.store = fixtures if isinstance(fixtures, FixtureStore) else FixtureStore(fixtures)
            self.table = {}
        self.strict = strict
        self.default = default

    def lookup(self, digest: str) -> str | None:
        if digest in self.table:
            return self.table[digest]
        if self.store is not None:
            entry = self.store.get(digest)
            if entry is not None:
                return entry["content"]
        return None

    def _complete(self, request: ChatRequest) -> ChatResponse:
        content = self.lookup(request.digest)
        if content is None:
            if self.strict:
                raise MissingFixtureError(f"no fixture for {request.digest} (tag {request.request_tag!r})")
            content = self.default
        return ChatResponse(content=content)


class RecordingClient(ChatClient):
    """Forwards to ``inner`` and writes each successful response as a fixture."""

    def __init__(self, inner: ChatClient, fixtures: FixtureStore | str | os.PathLike) -> None:
        super().__init__()
        self.inner = inner
        self.store = fixtures if isinstance(fixtures, FixtureStore) else FixtureStore(fixtures)
        self.backend_id = f"record:{inner.backend_id}"

    def _complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        if response.finish_reason == "stop" and response.content is not None:
            self.store.put(request.digest, request.request_tag, response.content)
        return response


class FunctionClient(ChatClient):
    """Answers with ``fn(request) -> str``; handy for scripted tests and offline fixtures."""

    backend_id = "function"

    def __init__(self, fn: Callable[[ChatRequest], str]) -> None:
        super().__init__()
        self.fn = fn

    def _complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(content=self.fn(request))
