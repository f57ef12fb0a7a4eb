"""Completion backends: a deterministic scripted backend for tests and an
OpenAI-compatible HTTP client for live runs.

Both share one contract: `complete()` never returns text past the first
matched stop sequence, and when a stop sequence fired, the returned text ends
at and includes the match. Token counts are provider-reported when available;
the scripted backend approximates with whitespace words x 1.3, which is what
the token-budget control thresholds are exercised against in tests.
"""

from __future__ import annotations

import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass

from .errors import ConfigError

logger = logging.getLogger(__name__)

FINISH_STOP = "stop_sequence"
FINISH_LENGTH = "length"
FINISH_NATURAL = "natural"
FINISH_ERROR = "error"

API_KEY_ENV_PREFIX = "RAISE_API_KEY_"

TOKENS_PER_WORD = 1.3


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[tuple[str, str], ...]  # (role, content) pairs
    prefill: str = ""
    stop_sequences: tuple[str, ...] = ()
    max_tokens: int = 2048
    temperature: float = 0.0
    seed: int | None = None

    def content_text(self) -> str:
        """All request text concatenated; what scripted matchers see."""
        parts = [content for _, content in self.messages]
        if self.prefill:
            parts.append(self.prefill)
        return "\n".join(parts)


@dataclass(frozen=True)
class CompletionChunk:
    text: str
    token_count: int
    finish: str
    matched_stop: str | None = None
    error: str | None = None


def approx_token_count(text: str) -> int:
    """Whitespace-delimited words x 1.3, rounded up."""
    words = len(text.split())
    return math.ceil(words * TOKENS_PER_WORD)


def truncate_at_stop(text: str, stops: tuple[str, ...]) -> tuple[str, str | None]:
    """Cut text at the earliest stop sequence, keeping the match itself."""
    best_idx = -1
    best_stop = None
    for stop in stops:
        if not stop:
            continue
        idx = text.find(stop)
        if idx >= 0 and (best_idx < 0 or idx < best_idx):
            best_idx = idx
            best_stop = stop
    if best_stop is None:
        return text, None
    return text[: best_idx + len(best_stop)], best_stop


class Backend:
    """Uniform completion interface; subclasses implement complete()."""

    name: str = "backend"

    def complete(self, req: CompletionRequest) -> CompletionChunk:
        raise NotImplementedError


@dataclass
class TapeEntry:
    text: str
    match: str | None = None  # substring matcher on request content
    consumed: bool = False


class ScriptedBackend(Backend):
    """Replays canned responses; the deterministic test double.

    Each complete() consumes the first unconsumed entry whose matcher fires
    on the request content, falling back to the next unconsumed matcher-less
    entry in tape order. With ``loop=True`` entries are never consumed (the
    tape can be replayed indefinitely); exhaustion then cannot occur.
    """

    def __init__(self, tape, name: str = "scripted", loop: bool = False):
        if not tape:
            raise ConfigError("scripted backend needs a non-empty tape")
        self.name = name
        self.loop = loop
        self._entries = [self._coerce(e) for e in tape]
        self._cursor = 0  # looping fallback position
        self._lock = threading.Lock()

    @staticmethod
    def _coerce(entry) -> TapeEntry:
        if isinstance(entry, TapeEntry):
            return TapeEntry(entry.text, entry.match)
        if isinstance(entry, str):
            return TapeEntry(entry)
        if isinstance(entry, tuple) and len(entry) == 2:
            return TapeEntry(text=entry[1], match=entry[0])
        raise ConfigError(f"unsupported tape entry: {entry!r}")

    def _pick(self, content: str) -> TapeEntry | None:
        for entry in self._entries:
            if entry.match and entry.match in content and (self.loop or not entry.consumed):
                if not self.loop:
                    entry.consumed = True
                return entry
        fallback = [e for e in self._entries if e.match is None]
        if not fallback:
            return None
        if self.loop:
            entry = fallback[self._cursor % len(fallback)]
            self._cursor += 1
            return entry
        for entry in fallback:
            if not entry.consumed:
                entry.consumed = True
                return entry
        return None

    def complete(self, req: CompletionRequest) -> CompletionChunk:
        with self._lock:
            entry = self._pick(req.content_text())
        if entry is None:
            return CompletionChunk(
                text="", token_count=0, finish=FINISH_ERROR, error="scripted tape exhausted"
            )
        text, matched = truncate_at_stop(entry.text, req.stop_sequences)
        tokens = approx_token_count(text)
        finish = FINISH_STOP if matched else FINISH_NATURAL
        return CompletionChunk(text=text, token_count=tokens, finish=finish, matched_stop=matched)


def scripted_backend(tape, matchers=None, name: str = "scripted", loop: bool = False) -> ScriptedBackend:
    """Build a ScriptedBackend from a tape of canned responses.

    ``matchers`` is an optional list of (substring, response) pairs that are
    checked, in order, before the sequential tape.
    """
    entries: list[TapeEntry] = []
    for pattern, response in matchers or ():
        entries.append(TapeEntry(text=response, match=pattern))
    for item in tape:
        entries.append(ScriptedBackend._coerce(item))
    return ScriptedBackend(entries, name=name, loop=loop)


def api_key_env_name(backend_name: str) -> str:
    """Environment variable carrying the credential for a backend name."""
    normalized = re.sub(r"[^A-Za-z0-9]", "_", backend_name).upper()
    return f"{API_KEY_ENV_PREFIX}{normalized}"


class HttpBackend(Backend):
    """OpenAI-compatible chat-completion client with retries.

    Stop sequences are enforced client-side: unless ``forward_stop`` is set
    (for servers that include the stop string in the output), the provider
    generates freely and the text is truncated here, so stop detection never
    depends on provider-specific finish_reason semantics.
    """

    def __init__(
        self,
        name: str,
        base_url: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str | None = None,
        supports_prefill: bool = False,
        forward_stop: bool = False,
        timeout_s: float = 120.0,
        max_retries: int = 3,
        extra_headers: dict | None = None,
    ):
        self.name = name
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.supports_prefill = supports_prefill
        self.forward_stop = forward_stop
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.extra_headers = dict(extra_headers or {})
        self._api_key = self._resolve_key(name, api_key, api_key_env)

    @staticmethod
    def _resolve_key(name: str, api_key: str | None, api_key_env: str | None) -> str:
        if api_key:
            return api_key
        candidates = [api_key_env] if api_key_env else []
        candidates.append(api_key_env_name(name))
        for env in candidates:
            if env and os.environ.get(env):
                return os.environ[env]
        raise ConfigError(
            f"no API key for backend {name!r}: set {candidates[-1]}"
            + (f" or {api_key_env}" if api_key_env else "")
        )

    def _build_messages(self, req: CompletionRequest) -> list[dict]:
        messages = [{"role": role, "content": content} for role, content in req.messages]
        if req.prefill:
            if self.supports_prefill:
                messages.append({"role": "assistant", "content": req.prefill})
            elif messages:
                messages[-1]["content"] = messages[-1]["content"] + "\n\n" + req.prefill
            else:
                messages.append({"role": "user", "content": req.prefill})
        return messages

    def complete(self, req: CompletionRequest) -> CompletionChunk:
        import requests

        payload = {
            "model": self.model,
            "messages": self._build_messages(req),
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        if self.forward_stop and req.stop_sequences:
            payload["stop"] = list(req.stop_sequences)

        headers = {"Authorization": f"Bearer {self._api_key}", **self.extra_headers}
        url = f"{self.base_url}/chat/completions"
        last_error = "unknown transport error"
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = str(exc)
                logger.warning("backend %s attempt %d failed: %s", self.name, attempt + 1, exc)
                time.sleep(0.5 * (2**attempt))
                continue
            if resp.status_code in (401, 403):
                raise ConfigError(
                    f"backend {self.name!r} rejected credentials (HTTP {resp.status_code}); "
                    f"check {api_key_env_name(self.name)}"
                )
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = f"HTTP {resp.status_code}"
                time.sleep(0.5 * (2**attempt))
                continue
            if resp.status_code != 200:
                return CompletionChunk(
                    text="", token_count=0, finish=FINISH_ERROR,
                    error=f"HTTP {resp.status_code}: {resp.text[:200]}",
                )
            return self._parse_response(resp.json(), req)
        return CompletionChunk(
            text="", token_count=0, finish=FINISH_ERROR,
            error=f"exhausted {self.max_retries} retries: {last_error}",
        )

    def _parse_response(self, data: dict, req: CompletionRequest) -> CompletionChunk:
        try:
            choice = data["choices"][0]
            text = choice.get("message", {}).get("content") or choice.get("text") or ""
            finish_reason = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError):
            return CompletionChunk(
                text="", token_count=0, finish=FINISH_ERROR, error="malformed completion response"
            )
        usage = data.get("usage") or {}
        tokens = usage.get("completion_tokens")
        cut, matched = truncate_at_stop(text, req.stop_sequences)
        if tokens is None:
            tokens = approx_token_count(cut)
        if matched:
            return CompletionChunk(text=cut, token_count=tokens, finish=FINISH_STOP, matched_stop=matched)
        finish = FINISH_LENGTH if finish_reason == "length" else FINISH_NATURAL
        return CompletionChunk(text=text, token_count=tokens, finish=finish)
