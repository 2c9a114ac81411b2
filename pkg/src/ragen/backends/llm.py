"""Chat-completion backends: live HTTP, record, replay and scripted.

All backends expose ``chat(request) -> ChatResponse``. Replay and scripted
backends never touch the network, which is what makes end-to-end runs
byte-reproducible in tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import httpx

from ..errors import BackendError, ReplayMissError, ScriptExhaustedError, StoreWriteError

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_API_KEY_ENV = "RAGEN_API_KEY"
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, Message) else Message(**m) for m in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        if msgs[0].role not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        object.__setattr__(self, "messages", msgs)

    def canonical(self) -> dict:
        return {
            "messages": [{"content": m.content, "role": m.role} for m in self.messages],
            "model": self.model,
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
        }

    @property
    def digest(self) -> str:
        return request_digest(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChatRequest":
        return cls(
            messages=tuple(Message(**m) for m in data["messages"]),
            model=data.get("model", "default"),
            temperature=data.get("temperature", 0.0),
            max_tokens=data.get("max_tokens", 1024),
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0


def request_digest(request: ChatRequest) -> str:
    blob = json.dumps(request.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


def chat(backend: Backend, request: ChatRequest) -> ChatResponse:
    return backend.chat(request)


class ScriptedBackend:
    """Serves queued responses in order, regardless of the request."""

    def __init__(self, responses: Iterable[str] = ()):
        self._queue = deque(responses)
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def push(self, *responses: str) -> None:
        self._queue.extend(responses)

    @property
    def remaining(self) -> int:
        return len(self._queue)

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            if not self._queue:
                raise ScriptExhaustedError(f"script exhausted after {len(self.requests) - 1} responses")
            content = self._queue.popleft()
        return ChatResponse(content=content, completion_tokens=len(content.split()))


class ReplayStore:
    """Directory of ``<digest>.json`` recordings."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)

    def path_for(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> Optional[ChatResponse]:
        path = self.path_for(digest)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return ChatResponse(**data["response"])

    def put(self, request: ChatRequest, response: ChatResponse) -> str:
        digest = request_digest(request)
        record = {
            "digest": digest,
            "request": request.canonical(),
            "response": {
                "content": response.content,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
                "latency_ms": response.latency_ms,
            },
        }
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = self.path_for(digest).with_suffix(".tmp")
            tmp.write_text(json.dumps(record, indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
            tmp.replace(self.path_for(digest))
        except OSError as exc:
            raise StoreWriteError(f"cannot write replay entry {digest}: {exc}") from exc
        return digest

    def __len__(self) -> int:
        if not self.directory.exists():
            return 0
        return sum(1 for _ in self.directory.glob("*.json"))


class ReplayBackend:
    def __init__(self, store: ReplayStore, strict: bool = True, fallback: Optional[Backend] = None):
        self.store = store
        self.strict = strict
        self.fallback = fallback

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        hit = self.store.get(digest)
        if hit is not None:
            return hit
        if self.strict or self.fallback is None:
            raise ReplayMissError(f"no recording for request digest {digest}")
        return self.fallback.chat(request)


class RecordingBackend:
    """Pass-through to another backend that persists every exchange."""

    def __init__(self, inner: Backend, store: ReplayStore):
        self.inner = inner
        self.store = store

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.chat(request)
        self.store.put(request, response)
        return response


def record_session(live: Backend, store: ReplayStore) -> RecordingBackend:
    return RecordingBackend(live, store)


_TRANSIENT_STATUS = {408, 409, 429, 500, 502, 503, 504}


class LiveBackend:
    """Chat-completions HTTP client with bounded retries and an in-flight limit."""

    def __init__(
        self,
        model: str,
        base_url: str = DEFAULT_BASE_URL,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        max_retries: int = 2,
        backoff_s: float = 0.5,
        timeout_s: float = 60.0,
        max_in_flight: int = 4,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout_s, transport=transport)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def chat(self, request: ChatRequest) -> ChatResponse:
        body = request.canonical()
        if body["model"] == "default":
            body["model"] = self.model
        last_err: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                with self._slots:
                    resp = self._client.post("/chat/completions", json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last_err = exc
                logger.warning("chat attempt %d failed: %r", attempt + 1, exc)
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last_err = BackendError(f"HTTP {resp.status_code}")
                logger.warning("chat attempt %d got HTTP %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected response shape: {exc}") from exc
            usage = data.get("usage") or {}
            return ChatResponse(
                content=content or "",
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                latency_ms=(time.monotonic() - start) * 1000.0,
            )
        raise BackendError(f"chat failed after {self.max_retries + 1} attempts: {last_err}")

    def close(self) -> None:
        self._client.close()


@dataclass
class ScriptBook:
    """Scripted sessions keyed by task id, language, or a shared default.

    A session is either a flat list of responses (one queue shared by all
    agents, consumed in call order) or a mapping agent name -> list.
    """

    tasks: dict = field(default_factory=dict)
    languages: dict = field(default_factory=dict)
    default: object = None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScriptBook":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_data(data)

    @classmethod
    def from_data(cls, data) -> "ScriptBook":
        if isinstance(data, list):
            return cls(default=data)
        if isinstance(data, dict) and ({"tasks", "languages", "default"} & data.keys()):
            return cls(tasks=data.get("tasks", {}), languages=data.get("languages", {}), default=data.get("default"))
        return cls(default=data)

    def session(self, task_id: str, language: str) -> object:
        for source, key in ((self.tasks, task_id), (self.languages, language)):
            if key in source:
                return source[key]
        if self.default is None:
            raise ScriptExhaustedError(f"no scripted session for task {task_id}")
        return self.default

    def backends(self, task_id: str, language: str, agents: Sequence[str]) -> dict[str, ScriptedBackend]:
        """Fresh backends for one run; agents missing from a mapping get an empty queue."""
        session = self.session(task_id, language)
        if isinstance(session, list):
            shared = ScriptedBackend(session)
            return {a: shared for a in agents}
        return {a: ScriptedBackend(session.get(a, [])) for a in agents}
