"""Chat-completions client for OpenAI-compatible endpoints.

Two backends speak the same wire format (a ``/v1/chat/completions`` request
body in, a response body out):

* :class:`HTTPBackend` posts to a real server;
* :class:`MockBackend` replays a :class:`MockScript` in process, keyed by a
  fingerprint of the prompt messages and by greedy/sampled mode.

:class:`Client` sits on top of either one and handles retries, logprob
parsing and bounded-parallel batches.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import httpx

from .core import GenerationTrace, RoleTag, SamplingParams, TokenLogprob
from .errors import (
    AuditError,
    CapabilityError,
    ConfigError,
    ContractError,
    TransientError,
    TransportError,
)

log = logging.getLogger(__name__)

MOCK_SCHEME = "mock:"
FIXED_CLOCK = "1970-01-01T00:00:00+00:00"

Messages = Sequence[tuple[str, str]]


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str = "default"
    api_key_env: str = "OPENAI_API_KEY"
    request_timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 8
    supports_top_k: bool = True

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EndpointConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(f"bad endpoint config: {exc}") from exc


@dataclass(frozen=True)
class Request:
    messages: tuple[tuple[str, str], ...]
    sampling: SamplingParams
    item_id: str = ""
    role_tag: RoleTag = RoleTag.ANSWER
    want_logprobs: bool = False
    top_logprobs_k: int = 0


def fingerprint(messages: Messages) -> str:
    h = hashlib.sha256()
    for role, text in messages:
        h.update(role.encode())
        h.update(b"\x1f")
        h.update(text.encode())
        h.update(b"\x1e")
    return h.hexdigest()


def _mode(sampling_or_temp: SamplingParams | float) -> str:
    temp = getattr(sampling_or_temp, "temperature", sampling_or_temp)
    return "greedy" if temp == 0 else "sampled"


_TOKEN_RE = re.compile(r"\s*\S+|\s+$")


def scripted(
    text: str,
    logprobs: float | Sequence[float] | None = 0.0,
    top: Sequence[Sequence[tuple[str, float]]] | None = None,
) -> dict[str, Any]:
    """Build one scripted completion.

    ``text`` is split into whitespace-led tokens so that joining the tokens
    reproduces it exactly. ``logprobs`` is one value for every token or a
    per-token list; ``None`` scripts a completion without logprobs.
    """
    pieces = _TOKEN_RE.findall(text) or [""]
    if logprobs is None:
        return {"text": text, "tokens": None}
    if isinstance(logprobs, (int, float)):
        logprobs = [float(logprobs)] * len(pieces)
    if len(logprobs) != len(pieces):
        raise ContractError(f"{len(pieces)} tokens but {len(logprobs)} logprobs for {text!r}")
    top = list(top or [])
    tokens = []
    for i, (tok, lp) in enumerate(zip(pieces, logprobs)):
        alts = [list(a) for a in top[i]] if i < len(top) else []
        tokens.append([tok, float(lp), alts])
    return {"text": text, "tokens": tokens}


@dataclass
class MockScript:
    """Scripted completions keyed by (prompt fingerprint, greedy|sampled)."""

    entries: dict[tuple[str, str], list[dict[str, Any]]] = field(default_factory=dict)
    default_behavior: str = "error"
    transient_failures: dict[str, int] = field(default_factory=dict)
    permanent_failures: set[str] = field(default_factory=set)

    def add(
        self,
        messages: Messages,
        completions: dict[str, Any] | list[dict[str, Any]],
        mode: str = "greedy",
    ) -> str:
        if isinstance(completions, dict):
            completions = [completions]
        fp = fingerprint(messages)
        self.entries.setdefault((fp, mode), []).extend(completions)
        return fp

    def fail(self, messages: Messages, transient: int = 0, permanent: bool = False) -> None:
        fp = fingerprint(messages)
        if transient:
            self.transient_failures[fp] = transient
        if permanent:
            self.permanent_failures.add(fp)

    def to_json(self) -> dict[str, Any]:
        return {
            "default_behavior": self.default_behavior,
            "entries": [
                {"fingerprint": fp, "mode": mode, "completions": comps}
                for (fp, mode), comps in sorted(self.entries.items())
            ],
            "transient_failures": dict(sorted(self.transient_failures.items())),
            "permanent_failures": sorted(self.permanent_failures),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> MockScript:
        script = cls(default_behavior=obj.get("default_behavior", "error"))
        if script.default_behavior not in ("error", "echo"):
            raise ConfigError(f"unknown mock default_behavior {script.default_behavior!r}")
        for entry in obj.get("entries", []):
            if "fingerprint" in entry:
                fp = entry["fingerprint"]
            else:
                fp = fingerprint([tuple(m) for m in entry["messages"]])
            key = (fp, entry.get("mode", "greedy"))
            script.entries.setdefault(key, []).extend(entry["completions"])
        script.transient_failures = dict(obj.get("transient_failures", {}))
        script.permanent_failures = set(obj.get("permanent_failures", []))
        return script

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> MockScript:
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError(f"mock script not found: {path}") from exc


class MockBackend:
    """In-process stand-in for a chat-completions server.

    Greedy requests always get completion 0 of their entry. Sampled requests
    pick ``seed % len(entry)`` when the request carries a seed, otherwise
    they walk a per-fingerprint counter.
    """

    def __init__(self, script: MockScript, delay: Callable[[dict], float] | None = None):
        self.script = script
        self.delay = delay
        self._lock = threading.Lock()
        self._counters: dict[tuple[str, str], int] = {}
        self._failures_left = dict(script.transient_failures)
        self.in_flight = 0
        self.max_in_flight = 0
        self.calls = 0

    def send(self, payload: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            self.in_flight += 1
            self.calls += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.delay is not None:
                time.sleep(self.delay(payload))
            return self._respond(payload)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _respond(self, payload: dict[str, Any]) -> dict[str, Any]:
        messages = [(m["role"], m["content"]) for m in payload["messages"]]
        fp = fingerprint(messages)
        if fp in self.script.permanent_failures:
            raise TransportError(f"mock: scripted permanent failure for {fp[:12]}")
        with self._lock:
            left = self._failures_left.get(fp, 0)
            if left:
                self._failures_left[fp] = left - 1
        if left:
            raise TransientError(f"mock: scripted transient failure for {fp[:12]}")

        key = (fp, _mode(payload.get("temperature", 0.0)))
        completions = self.script.entries.get(key)
        if not completions:
            if self.script.default_behavior == "echo":
                completion = scripted(messages[-1][1])
            else:
                raise TransportError(f"mock: no scripted completion for {key[1]} prompt {fp[:12]}")
        elif key[1] == "greedy":
            completion = completions[0]
        elif payload.get("seed") is not None:
            completion = completions[payload["seed"] % len(completions)]
        else:
            with self._lock:
                idx = self._counters.get(key, 0)
                self._counters[key] = idx + 1
            completion = completions[idx % len(completions)]
        return _openai_response(completion, payload)


def _openai_response(completion: dict[str, Any], payload: dict[str, Any]) -> dict[str, Any]:
    choice: dict[str, Any] = {
        "index": 0,
        "message": {"role": "assistant", "content": completion["text"]},
        "finish_reason": "stop",
        "logprobs": None,
    }
    if payload.get("logprobs") and completion.get("tokens") is not None:
        k = payload.get("top_logprobs") or 0
        choice["logprobs"] = {
            "content": [
                {
                    "token": tok,
                    "logprob": lp,
                    "top_logprobs": [{"token": a, "logprob": alp} for a, alp in alts[:k]],
                }
                for tok, lp, alts in completion["tokens"]
            ]
        }
    return {"object": "chat.completion", "choices": [choice]}


class HTTPBackend:
    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.url = config.base_url.rstrip("/") + "/v1/chat/completions"
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=config.request_timeout, headers=headers, transport=transport)

    def send(self, payload: dict[str, Any]) -> dict[str, Any]:
        try:
            resp = self._client.post(self.url, json=payload)
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout talking to {self.config.base_url}: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"cannot reach {self.config.base_url}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"{self.config.base_url} returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(
                f"{self.config.base_url} returned HTTP {resp.status_code}: {resp.text[:300]}"
            )
        return resp.json()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Client:
    """Retrying, logprob-aware client over a backend.

    Mock-backed clients default to a fixed clock so that traces from repeated
    runs are byte-identical.
    """

    def __init__(
        self,
        config: EndpointConfig,
        backend: Any = None,
        clock: Callable[[], str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter: random.Random | None = None,
    ):
        self.config = config
        if backend is None:
            backend = _backend_for(config)
        self.backend = backend
        if clock is None:
            clock = (lambda: FIXED_CLOCK) if isinstance(backend, MockBackend) else utc_now
        self.clock = clock
        self.sleep = sleep
        self._jitter = jitter or random.Random()

    @classmethod
    def from_config(cls, config: EndpointConfig, **kwargs) -> Client:
        return cls(config, **kwargs)

    def backoff(self, attempt: int) -> float:
        return 0.5 * 2**attempt * self._jitter.uniform(0.75, 1.25)

    def _payload(self, req: Request) -> tuple[dict[str, Any], list[str]]:
        s = req.sampling
        notes = []
        payload: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [{"role": r, "content": t} for r, t in req.messages],
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_tokens,
            "n": 1,
        }
        if s.top_k:
            if self.config.supports_top_k:
                payload["top_k"] = s.top_k
            else:
                notes.append("top_k_dropped")
        if s.seed is not None:
            payload["seed"] = s.seed
        if req.want_logprobs:
            payload["logprobs"] = True
            if req.top_logprobs_k:
                payload["top_logprobs"] = req.top_logprobs_k
        return payload, notes

    def complete(
        self,
        messages: Messages,
        sampling: SamplingParams,
        want_logprobs: bool = False,
        top_logprobs_k: int = 0,
        *,
        item_id: str = "",
        role_tag: RoleTag = RoleTag.ANSWER,
    ) -> GenerationTrace:
        req = Request(
            messages=tuple((r, t) for r, t in messages),
            sampling=sampling,
            item_id=item_id,
            role_tag=role_tag,
            want_logprobs=want_logprobs,
            top_logprobs_k=top_logprobs_k,
        )
        return self.run(req)

    def run(self, req: Request) -> GenerationTrace:
        if not req.messages:
            raise ContractError("messages must be non-empty")
        payload, notes = self._payload(req)
        attempt = 0
        while True:
            try:
                body = self.backend.send(payload)
                break
            except TransientError as exc:
                if attempt >= self.config.max_retries:
                    raise TransportError(
                        f"{self.config.base_url}: giving up after {attempt + 1} attempts: {exc}"
                    ) from exc
                log.debug("retrying %s after %s", req.item_id, exc)
                self.sleep(self.backoff(attempt))
                attempt += 1
        return self._to_trace(req, body, attempt, notes)

    def _to_trace(self, req: Request, body: dict, retries: int, notes: list[str]) -> GenerationTrace:
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.config.base_url}: malformed response body") from exc
        tokens: tuple[TokenLogprob, ...] = ()
        if req.want_logprobs:
            content = (choice.get("logprobs") or {}).get("content")
            if content is None:
                raise CapabilityError(
                    f"{self.config.base_url} returned no logprobs for item {req.item_id!r}"
                )
            tokens = tuple(
                TokenLogprob(
                    c["token"],
                    min(float(c["logprob"]), 0.0),
                    tuple(
                        (a["token"], min(float(a["logprob"]), 0.0))
                        for a in c.get("top_logprobs") or ()
                    ),
                )
                for c in content
            )
        return GenerationTrace(
            item_id=req.item_id,
            role_tag=req.role_tag,
            prompt_messages=req.messages,
            output_text=text,
            token_logprobs=tokens,
            sampling=req.sampling,
            created_at=self.clock(),
            retry_count=retries,
            notes=tuple(notes),
        )

    def complete_batch(
        self, requests: Iterable[Request], parallelism: int | None = None
    ) -> list[GenerationTrace | AuditError]:
        """Run requests with at most ``parallelism`` in flight.

        Results come back in request order. A request that fails carries its
        exception in its slot instead of aborting the batch.
        """
        requests = list(requests)
        parallelism = parallelism or self.config.max_parallel
        if parallelism > self.config.max_parallel:
            raise ContractError(
                f"parallelism {parallelism} exceeds max_parallel {self.config.max_parallel}"
            )
        if not requests:
            return []

        def one(req: Request) -> GenerationTrace | AuditError:
            try:
                return self.run(req)
            except AuditError as exc:
                return exc

        if parallelism == 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, requests))


def _backend_for(config: EndpointConfig):
    if config.is_mock:
        path = config.base_url[len(MOCK_SCHEME):]
        script = MockScript.load(path) if path else MockScript(default_behavior="echo")
        return MockBackend(script)
    return HTTPBackend(config)
