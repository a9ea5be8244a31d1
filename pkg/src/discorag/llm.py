"""Backend-agnostic chat completion with usage accounting and repair-retry.

Two backends ship: ``MockBackend`` (fixture table keyed by prompt hash, plus rule
and fallback responders; fully offline) and ``HttpBackend`` (OpenAI-style
``/chat/completions`` JSON API).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Generic, Mapping, NamedTuple, Protocol, TypeVar

from .corpus import DEFAULT_TOKENIZER, ConfigurationError, Tokenizer

log = logging.getLogger(__name__)

TAGS = frozenset({"rst_parse", "graph", "plan", "generate", "judge", "baseline"})

DEFAULT_DECODE = {"max_output_tokens": 1024, "beam_width": 3}

REPAIR_SUFFIX = (
    "\n\nYOUR PREVIOUS OUTPUT WAS REJECTED: [{code}] {message}\n"
    "Produce the complete output again, following the required output format exactly."
)


class LlmError(RuntimeError):
    pass


class TransportError(LlmError):
    retryable = True

    def __init__(self, message: str, elapsed_s: float):
        super().__init__(f"{message} (after {elapsed_s:.2f}s)")
        self.elapsed_s = elapsed_s


class StructuredOutputError(ValueError):
    """A completion violated its output contract. ``code`` is stable and machine-readable."""

    code = "INVALID_OUTPUT"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    @property
    def violation(self) -> str:
        return f"[{self.code}] {self}"


class EmptyCompletionError(StructuredOutputError):
    code = "EMPTY_COMPLETION"


class StructuredOutputExhausted(LlmError):
    def __init__(self, tag: str, attempts: int, last_text: str, last_violation: str):
        super().__init__(f"{tag}: no valid output after {attempts} attempts; last: {last_violation}")
        self.tag = tag
        self.attempts = attempts
        self.last_text = last_text
        self.last_violation = last_violation


@dataclass(frozen=True)
class LlmRequest:
    backend_id: str
    user_prompt: str
    tag: str
    system_prompt: str = ""
    decode_params: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULT_DECODE))
    query_id: str = ""

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown request tag {self.tag!r}")

    @property
    def prompt_hash(self) -> str:
        return prompt_hash(self.system_prompt, self.user_prompt)


def prompt_hash(system_prompt: str, user_prompt: str) -> str:
    return hashlib.sha256(f"{system_prompt}\x00{user_prompt}".encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LlmResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: float
    attempt: int = 1


@dataclass(frozen=True)
class UsageRecord:
    query_id: str
    tag: str
    input_tokens: int
    output_tokens: int
    latency_ms: float
    backend_id: str = ""


class UsageLedger:
    """Append-only log of LLM calls; appends are thread-safe."""

    def __init__(self):
        self._records: list[UsageRecord] = []
        self._lock = threading.Lock()

    def append(self, rec: UsageRecord) -> None:
        with self._lock:
            self._records.append(rec)

    @property
    def records(self) -> list[UsageRecord]:
        with self._lock:
            return list(self._records)

    def for_query(self, query_id: str) -> list[UsageRecord]:
        return [r for r in self.records if r.query_id == query_id]

    def totals(self, query_id: str | None = None) -> dict:
        recs = self.records if query_id is None else self.for_query(query_id)
        by_tag: dict[str, int] = {}
        for r in recs:
            by_tag[r.tag] = by_tag.get(r.tag, 0) + 1
        return {
            "calls": len(recs),
            "input_tokens": sum(r.input_tokens for r in recs),
            "output_tokens": sum(r.output_tokens for r in recs),
            "total_tokens": sum(r.input_tokens + r.output_tokens for r in recs),
            "latency_ms": sum(r.latency_ms for r in recs),
            "calls_by_tag": dict(sorted(by_tag.items())),
        }


class BackendReply(NamedTuple):
    text: str
    latency_ms: float


class Backend(Protocol):
    name: str

    def generate(self, req: LlmRequest) -> BackendReply: ...


# -- mock -------------------------------------------------------------------

@dataclass
class MockFixtures:
    """Scripted responses: exact prompt-hash table first, then substring rules in order."""

    responses: dict[str, str] = field(default_factory=dict)
    rules: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "MockFixtures":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(responses=dict(obj.get("responses", {})), rules=list(obj.get("rules", [])))

    def lookup(self, req: LlmRequest) -> str | None:
        hit = self.responses.get(req.prompt_hash)
        if hit is not None:
            return hit
        for rule in self.rules:
            if "tag" in rule and rule["tag"] != req.tag:
                continue
            if "contains" in rule and rule["contains"] not in req.user_prompt:
                continue
            return rule["response"]
        return None


class MockBackend:
    """Deterministic offline backend: response = f(prompt hash, fixture table).

    Unmatched prompts go to ``fallback`` (a pure function of the request); the
    default fallback synthesizes a valid response for each tag. Latency is a
    virtual clock (``ms_per_input_token``/``ms_per_output_token``, default 0) so
    reports stay byte-reproducible.
    """

    def __init__(self, fixtures: MockFixtures | None = None,
                 fallback: Callable[[LlmRequest], str] | None = None,
                 name: str = "mock", ms_per_input_token: float = 0.0,
                 ms_per_output_token: float = 0.0, tok: Tokenizer = DEFAULT_TOKENIZER):
        self.fixtures = fixtures or MockFixtures()
        if fallback is None:
            from .mock import default_response
            fallback = default_response
        self.fallback = fallback
        self.name = name
        self.ms_in = ms_per_input_token
        self.ms_out = ms_per_output_token
        self.tok = tok

    def generate(self, req: LlmRequest) -> BackendReply:
        text = self.fixtures.lookup(req)
        if text is None:
            text = self.fallback(req)
        latency = 0.0
        if self.ms_in or self.ms_out:
            latency = (self.ms_in * len(self.tok.tokenize(req.user_prompt))
                       + self.ms_out * len(self.tok.tokenize(text)))
        return BackendReply(text, latency)


# -- http -------------------------------------------------------------------

class HttpBackend:
    """OpenAI-style chat completion over HTTP. Secrets come from the environment only."""

    def __init__(self, url: str, api_key: str | None, model: str, timeout_s: float = 120.0,
                 name: str = "http", transport=None):
        import httpx

        self.url = url
        self.model = model
        self.name = name
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout_s, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, model: str, url_var: str = "LLM_API_URL", key_var: str = "LLM_API_KEY",
                 name: str = "http") -> "HttpBackend":
        url = os.environ.get(url_var)
        if not url:
            raise ConfigurationError(f"{url_var} is not set")
        return cls(url, os.environ.get(key_var), model, name=name)

    def body(self, req: LlmRequest) -> dict:
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        body: dict[str, Any] = {"model": self.model, "messages": messages}
        for key, value in req.decode_params.items():
            # Opaque decode params (e.g. beam_width) are forwarded untouched.
            body["max_tokens" if key == "max_output_tokens" else key] = value
        return body

    def generate(self, req: LlmRequest) -> BackendReply:
        import httpx

        start = time.perf_counter()
        try:
            resp = self._client.post(self.url, json=self.body(req))
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout calling {self.url}: {exc}",
                                 time.perf_counter() - start) from exc
        except httpx.TransportError as exc:
            raise TransportError(f"transport failure calling {self.url}: {exc}",
                                 time.perf_counter() - start) from exc
        elapsed = time.perf_counter() - start
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code} from {self.url}", elapsed)
        if resp.status_code >= 400:
            raise LlmError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
        try:
            text = resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"unexpected response body from {self.url}") from exc
        return BackendReply(text, elapsed * 1000.0)


# -- client -----------------------------------------------------------------

T = TypeVar("T")


@dataclass(frozen=True)
class Validated(Generic[T]):
    value: T
    attempts: int
    response: LlmResponse


class LlmClient:
    def __init__(self, backends: Mapping[str, Backend] | None = None,
                 ledger: UsageLedger | None = None, max_in_flight: int = 8,
                 tok: Tokenizer = DEFAULT_TOKENIZER, transport_retries: int = 2,
                 backoff_s: float = 0.5):
        self.backends: dict[str, Backend] = dict(backends or {})
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.tok = tok
        self.transport_retries = transport_retries
        self.backoff_s = backoff_s

    def register(self, backend_id: str, backend: Backend) -> None:
        self.backends[backend_id] = backend

    def complete(self, req: LlmRequest) -> LlmResponse:
        backend = self.backends.get(req.backend_id)
        if backend is None:
            raise ConfigurationError(f"backend {req.backend_id!r} is not registered")
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._slots:
                    reply = backend.generate(req)
                break
            except TransportError as exc:
                if attempt > self.transport_retries:
                    raise
                log.warning("transport error on %s (attempt %d): %s", req.tag, attempt, exc)
                time.sleep(self.backoff_s * attempt)
        resp = LlmResponse(
            text=reply.text,
            input_tokens=len(self.tok.tokenize(req.system_prompt)) + len(self.tok.tokenize(req.user_prompt)),
            output_tokens=len(self.tok.tokenize(reply.text)),
            latency_ms=max(0.0, reply.latency_ms),
            attempt=attempt,
        )
        self.ledger.append(UsageRecord(req.query_id, req.tag, resp.input_tokens,
                                       resp.output_tokens, resp.latency_ms, req.backend_id))
        if not reply.text.strip():
            raise EmptyCompletionError(f"backend {req.backend_id!r} returned empty text")
        return resp

    def run_with_retry(self, req: LlmRequest, validator: Callable[[str], T],
                       max_attempts: int = 3) -> Validated[T]:
        """Call, validate, and on a contract violation re-ask with the violation appended.

        Raises StructuredOutputExhausted once ``max_attempts`` completions were rejected.
        """
        if max_attempts < 1:
            raise ConfigurationError("max_attempts must be >= 1")
        current = req
        last_text, last_violation = "", ""
        for attempt in range(1, max_attempts + 1):
            try:
                resp = self.complete(current)
                return Validated(validator(resp.text), attempt, resp)
            except StructuredOutputError as exc:
                last_violation = exc.violation
                last_text = resp.text if not isinstance(exc, EmptyCompletionError) else ""
                log.info("%s attempt %d rejected: %s", req.tag, attempt, last_violation)
                current = replace(req, user_prompt=req.user_prompt + REPAIR_SUFFIX.format(
                    code=exc.code, message=str(exc)))
        raise StructuredOutputExhausted(req.tag, max_attempts, last_text, last_violation)
