"""Chat-completion backends: an OpenAI-compatible HTTP client and a scripted mock."""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol, Sequence, Union

import httpx

from ._http import PostStats, RetryPolicy, api_key_from_env, post_json
from .errors import BackendError, ContractError, EmptyResponseError, ScriptMismatchError

DEFAULT_MODEL = "gpt-3.5-turbo"


@dataclass(frozen=True)
class ChatRequest:
    user_text: str
    system_text: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 512
    model_name: str = DEFAULT_MODEL

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ContractError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ContractError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ContractError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    backend_latency_ms: int = 0
    attempts: int = 1


class ChatBackend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True)
class ChatConfig:
    backend: Literal["remote", "mock"] = "remote"
    base_url: str = "https://api.openai.com/v1"
    model_name: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 512
    timeout_ms: int = 120_000
    max_retries: int = 3
    max_in_flight: int = 4
    mock_script: str | None = None


class RemoteChat:
    """Client for ``POST {base_url}/chat/completions``.

    At most ``max_in_flight`` requests run at once per instance; extra callers
    block until a slot frees up.
    """

    def __init__(
        self,
        cfg: ChatConfig | None = None,
        *,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.cfg = cfg or ChatConfig()
        self.url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else api_key_from_env()
        self.client = client or httpx.Client(timeout=self.cfg.timeout_ms / 1000)
        self.policy = RetryPolicy(max_retries=self.cfg.max_retries)
        self._slots = threading.BoundedSemaphore(max(1, self.cfg.max_in_flight))
        self._sleep = sleep
        self._rng = rng
        self.last_stats: PostStats | None = None

    def payload(self, req: ChatRequest) -> dict:
        messages = []
        if req.system_text:
            messages.append({"role": "system", "content": req.system_text})
        messages.append({"role": "user", "content": req.user_text})
        return {
            "model": req.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }

    def complete(self, req: ChatRequest) -> ChatResponse:
        stats = PostStats()
        t0 = time.perf_counter()
        with self._slots:
            try:
                body = post_json(
                    self.client,
                    self.url,
                    self.payload(req),
                    api_key=self.api_key,
                    policy=self.policy,
                    sleep=self._sleep,
                    rng=self._rng,
                    stats=stats,
                )
            finally:
                self.last_stats = stats
        latency = int((time.perf_counter() - t0) * 1000)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.url}: malformed completion body ({exc})", attempts=stats.attempts) from exc
        if not text or not text.strip():
            raise EmptyResponseError(f"{self.url}: empty completion", attempts=stats.attempts)
        usage = body.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            backend_latency_ms=latency,
            attempts=stats.attempts,
        )


Matcher = Union[str, tuple[str, ...]]


def _matches(matcher: Matcher, text: str) -> bool:
    if isinstance(matcher, str):
        return matcher in text
    return all(m in text for m in matcher)


@dataclass
class ScriptedMock:
    """Replies from a fixed script instead of a model.

    Each entry pairs a matcher with a reply. A matcher is a substring, or a
    tuple of substrings that must all occur in the prompt. In strict mode the
    entries are consumed in order and every prompt must match the next one;
    otherwise the first matching entry answers and entries are reusable.
    """

    script: Sequence[tuple[Matcher, str]]
    strict: bool = False
    default: str | None = None
    calls: list[ChatRequest] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.script = [(tuple(m) if isinstance(m, list) else m, r) for m, r in self.script]
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
            reply = self._reply(req.user_text)
        if not reply.strip():
            raise EmptyResponseError("scripted reply is empty")
        return ChatResponse(
            text=reply,
            prompt_tokens=len(req.user_text) // 4,
            completion_tokens=len(reply) // 4,
            backend_latency_ms=0,
        )

    def _reply(self, prompt: str) -> str:
        if self.strict:
            if self._cursor >= len(self.script):
                raise ScriptMismatchError(f"script exhausted after {self._cursor} replies")
            matcher, reply = self.script[self._cursor]
            if not _matches(matcher, prompt):
                raise ScriptMismatchError(f"prompt does not contain expected matcher {matcher!r} (entry {self._cursor})")
            self._cursor += 1
            return reply
        for matcher, reply in self.script:
            if _matches(matcher, prompt):
                return reply
        if self.default is not None:
            return self.default
        raise ScriptMismatchError(f"no script entry matches prompt starting {prompt[:60]!r}")

    def reset(self) -> None:
        with self._lock:
            self._cursor = 0
            self.calls.clear()

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedMock:
        """Load ``{"strict": bool, "default": str|null, "script": [{"match": .., "reply": ..}]}``."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, list):
            doc = {"script": doc}
        script = []
        for entry in doc["script"]:
            m = entry["match"]
            script.append((tuple(m) if isinstance(m, list) else m, entry["reply"]))
        return cls(script=script, strict=bool(doc.get("strict", False)), default=doc.get("default"))


def make_chat(cfg: ChatConfig, **kwargs) -> ChatBackend:
    if cfg.backend == "mock":
        if not cfg.mock_script:
            raise ContractError("mock chat backend needs a mock_script path")
        return ScriptedMock.from_file(cfg.mock_script)
    if cfg.backend == "remote":
        return RemoteChat(cfg, **kwargs)
    raise ContractError(f"unknown chat backend {cfg.backend!r}")
