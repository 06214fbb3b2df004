"""Language-model access: OpenAI-compatible HTTP backend, scripted mock, response cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .core import PromptTemplate, load_templates, render_prompt
from .errors import MockExhausted, MockUnmatched, TransportError, Unsupported

log = logging.getLogger(__name__)

API_KEY_ENV = "AMBER_LLM_API_KEY"
CACHE_DIR_ENV = "AMBER_CACHE_DIR"
ROLES = ("system", "user", "assistant")
SCORE_TAG = "score"


@dataclass(frozen=True)
class LlmRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 512
    want_logprobs: bool = False
    # Which template produced the request; used by the mock, not part of the cache key.
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple((r, c) for r, c in self.messages))
        if not self.messages:
            raise ValueError("request has no messages")
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"bad role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def prompt_text(self) -> str:
        return "\n".join(c for _, c in self.messages)


@dataclass(frozen=True)
class LlmResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    usage: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "token_logprobs": None if self.token_logprobs is None else [list(t) for t in self.token_logprobs],
            "usage": list(self.usage),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LlmResponse":
        lps = d.get("token_logprobs")
        return cls(
            d["text"],
            None if lps is None else tuple((str(t), float(lp)) for t, lp in lps),
            tuple(d.get("usage", (0, 0))),
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(request: LlmRequest) -> str:
    payload = {
        "model": request.model,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "want_logprobs": request.want_logprobs,
        "messages": [[r, c] for r, c in request.messages],
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


class Backend(Protocol):
    supports_scoring: bool

    def complete(self, request: LlmRequest) -> LlmResponse: ...

    def score(self, request: LlmRequest) -> LlmResponse: ...


class ResponseCache:
    """One JSON file per request digest; writes go through a temp file + rename."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> LlmResponse | None:
        path = self.dir / key
        try:
            return LlmResponse.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            return None
        except (ValueError, KeyError):
            log.warning("ignoring corrupt cache entry %s", path)
            return None

    def put(self, key: str, response: LlmResponse) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(response.to_dict()))
        os.replace(tmp, self.dir / key)


# --- scripted mock ------------------------------------------------------------

@dataclass(frozen=True)
class MockEntry:
    template: str | None
    contains: str | None
    response: LlmResponse

    def matches(self, request: LlmRequest) -> bool:
        if self.template is not None and self.template != request.tag:
            return False
        return self.contains is None or self.contains in request.prompt_text


def _entry_from_dict(d: Mapping) -> MockEntry:
    lps = d.get("token_logprobs")
    if lps is None and "logprobs" in d:
        lps = [["", float(x)] for x in d["logprobs"]]
    resp = LlmResponse(
        d.get("text", ""),
        None if lps is None else tuple((str(t), float(lp)) for t, lp in lps),
        tuple(d.get("usage", (0, 0))),
    )
    return MockEntry(d.get("template"), d.get("contains"), resp)


class MockBackend:
    """Plays back a script of canned responses.

    ``sequential`` consumes entries in order; an entry that names a template
    must line up with the request, so a pipeline issuing calls in a different
    order fails loudly. ``matched`` picks the first entry whose matcher
    applies and never consumes it.
    """

    def __init__(self, entries: Sequence[MockEntry], mode: str = "sequential"):
        if mode not in ("sequential", "matched"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.entries = list(entries)
        self.mode = mode
        self.position = 0
        self.calls: list[LlmRequest] = []
        self._lock = threading.Lock()
        self.supports_scoring = any(e.template == SCORE_TAG for e in self.entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        """JSON-lines script. An optional first line ``{"mode": ...}`` sets the mode."""
        mode = "sequential"
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if not entries and set(rec) == {"mode"}:
                    mode = rec["mode"]
                    continue
                entries.append(_entry_from_dict(rec))
        return cls(entries, mode)

    @classmethod
    def replies(cls, *texts: str) -> "MockBackend":
        return cls([MockEntry(None, None, LlmResponse(t)) for t in texts])

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.position if self.mode == "sequential" else 0

    def _next(self, request: LlmRequest) -> LlmResponse:
        with self._lock:
            self.calls.append(request)
            if self.mode == "sequential":
                if self.position >= len(self.entries):
                    raise MockExhausted(f"script exhausted at call {len(self.calls)} ({request.tag})")
                entry = self.entries[self.position]
                if not entry.matches(request):
                    raise MockUnmatched(
                        f"call {len(self.calls)}: expected {entry.template or '*'}"
                        f"{' containing ' + repr(entry.contains) if entry.contains else ''}, got {request.tag}"
                    )
                self.position += 1
                return entry.response
            for entry in self.entries:
                if entry.matches(request):
                    return entry.response
            raise MockUnmatched(f"no script entry matches a {request.tag or 'untagged'} request")

    def complete(self, request: LlmRequest) -> LlmResponse:
        return self._next(request)

    def score(self, request: LlmRequest) -> LlmResponse:
        if not self.supports_scoring:
            raise Unsupported("mock script has no scoring entries")
        resp = self._next(request)
        if resp.token_logprobs is None:
            raise Unsupported("matched mock entry carries no logprobs")
        return resp


# --- remote -------------------------------------------------------------------

class RemoteBackend:
    """OpenAI-compatible HTTP endpoint.

    ``base_url`` is the API root (for example ``http://host:8000/v1``); chat
    requests go to ``/chat/completions``. Continuation scoring needs a
    server that honours ``echo`` with logprobs on ``/completions`` and must be
    switched on explicitly.
    """

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 60.0,
                 retries: int = 3, backoff: float = 0.5, supports_scoring: bool = False,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        if api_key is None:
            api_key = os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self.retries = retries
        self.backoff = backoff
        self.supports_scoring = supports_scoring
        self.sleep = sleep

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        last, status = "no attempt made", None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(url, json=body)
            except httpx.HTTPError as e:
                last = f"{type(e).__name__}: {e}"
                status = None
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError:
                        raise TransportError(f"non-JSON body from {url}", 200) from None
                status = resp.status_code
                last = f"HTTP {status}"
                if status != 429 and status < 500:
                    raise TransportError(f"{url}: {last}: {resp.text[:200]}", status)
            log.warning("%s failed (%s), attempt %d/%d", url, last, attempt + 1, self.retries + 1)
        raise TransportError(f"{url}: {last} after {self.retries} retries", status)

    def complete(self, request: LlmRequest) -> LlmResponse:
        body = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs:
            body["logprobs"] = True
        data = self._post("/chat/completions", body)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise TransportError("malformed chat-completions payload") from None
        lps = None
        content = (choice.get("logprobs") or {}).get("content") if request.want_logprobs else None
        if content:
            lps = tuple((t["token"], float(t["logprob"])) for t in content)
        usage = data.get("usage") or {}
        return LlmResponse(text, lps, (usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)))

    def score(self, request: LlmRequest) -> LlmResponse:
        if not self.supports_scoring:
            raise Unsupported("remote backend not configured for continuation scoring")
        prefix, continuation = request.messages[0][1], request.messages[-1][1]
        body = {
            "model": request.model,
            "prompt": prefix + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0,
        }
        data = self._post("/completions", body)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, values, offsets = lp["tokens"], lp["token_logprobs"], lp["text_offset"]
        except (KeyError, IndexError, TypeError):
            raise Unsupported("endpoint did not echo prompt logprobs") from None
        picked = tuple(
            (tok, float(v)) for tok, v, off in zip(tokens, values, offsets)
            if off >= len(prefix) and v is not None
        )
        return LlmResponse("", picked)


# --- gateway --------------------------------------------------------------------

class Gateway:
    """Front door for every model call: caching, call accounting, in-flight limit,
    and template rendering through :meth:`ask`."""

    def __init__(self, backend: Backend, model: str = "mock", cache_dir: str | Path | None = None,
                 prompts: Mapping[str, PromptTemplate] | None = None, max_in_flight: int = 4,
                 max_tokens: int = 512):
        self.backend = backend
        self.model = model
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.prompts = dict(prompts) if prompts is not None else load_templates()
        self.max_tokens = max_tokens
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self.backend_calls = 0
        self.cache_hits = 0

    @property
    def supports_scoring(self) -> bool:
        return bool(getattr(self.backend, "supports_scoring", False))

    def _count(self, attr: str) -> None:
        with self._lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def _dispatch(self, request: LlmRequest, call) -> LlmResponse:
        key = cache_key(request) if self.cache is not None else None
        if key is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._count("cache_hits")
                return hit
        with self._slots:
            self._count("backend_calls")
            resp = call(request)
        if key is not None:
            self.cache.put(key, resp)
        return resp

    def complete(self, request: LlmRequest) -> LlmResponse:
        if request.messages[-1][0] != "user":
            raise ValueError("generation requests must end with a user message")
        return self._dispatch(request, self.backend.complete)

    def ask(self, template: str, **bindings: str) -> str:
        prompt = render_prompt(self.prompts[template], bindings)
        req = LlmRequest(self.model, (("user", prompt),), 0.0, self.max_tokens, False, template)
        return self.complete(req).text

    def score_continuation(self, prefix: str, continuation: str) -> float:
        """Total logprob (nats) of ``continuation`` forced after ``prefix``."""
        if not continuation:
            return 0.0
        if not self.supports_scoring:
            raise Unsupported(f"{type(self.backend).__name__} cannot score continuations")
        req = LlmRequest(self.model, (("user", prefix), ("assistant", continuation)), 0.0, 1, True, SCORE_TAG)
        resp = self._dispatch(req, self.backend.score)
        if resp.token_logprobs is None:
            raise Unsupported("backend returned no token logprobs")
        return sum(lp for _, lp in resp.token_logprobs)


class CountingGateway:
    """Per-question view of a shared gateway that tallies completions."""

    def __init__(self, inner: Gateway):
        self.inner = inner
        self.calls = 0
        self.prompts = inner.prompts

    def ask(self, template: str, **bindings: str) -> str:
        self.calls += 1
        return self.inner.ask(template, **bindings)

    def score_continuation(self, prefix: str, continuation: str) -> float:
        return self.inner.score_continuation(prefix, continuation)

    @property
    def supports_scoring(self) -> bool:
        return self.inner.supports_scoring
