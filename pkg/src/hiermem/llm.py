"""Chat providers, prompt rendering, reply parsers and token accounting."""

from __future__ import annotations

import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

from .errors import ConfigurationError, TemplateError, TransportError
from .prompts import TEMPLATES

logger = logging.getLogger(__name__)

UNMATCHED_REPLY = "UNMATCHED"

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")
_INT_RE = re.compile(r"-?\d+")
_LEADING_INT_RE = re.compile(r"^\s*(-?\d+)")
_SCORE_RE = re.compile(r"score", re.IGNORECASE)
_LIST_ITEM_RE = re.compile(r"^\s*\d+\.\s+(.*?)\s*$")


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def placeholders(template_name: str) -> list[str]:
    """Placeholder names of a template, in order of first appearance."""
    system, user = _template(template_name)
    seen: list[str] = []
    for name in _PLACEHOLDER_RE.findall(system + user):
        if name not in seen:
            seen.append(name)
    return seen


def _template(name: str) -> tuple[str, str]:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ConfigurationError(f"unknown prompt template {name!r}") from None


def render(template_name: str, bindings: Mapping[str, object]) -> tuple[str, str]:
    """Substitute ``bindings`` into a template; returns ``(system_text, user_text)``.

    Substitution is single-pass, so braces inside bound values are left alone.
    """
    system, user = _template(template_name)
    for name in placeholders(template_name):
        if name not in bindings:
            raise TemplateError(template_name, name)

    def fill(text: str) -> str:
        return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), text)

    return fill(system), fill(user)


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------


def parse_score(text: str) -> int | None:
    """First integer after the last "Score" in ``text``.

    A reply without the word is taken as a continuation of a prompt ending in
    ``"Score: "`` and accepted only if it starts with an integer.
    """
    matches = list(_SCORE_RE.finditer(text))
    if matches:
        m = _INT_RE.search(text, matches[-1].end())
        return int(m.group()) if m else None
    m = _LEADING_INT_RE.match(text)
    return int(m.group(1)) if m else None


def parse_numbered_list(text: str) -> list[str]:
    """Items of ``1. foo`` style lines, in order; numbering gaps are tolerated."""
    items = []
    for line in text.splitlines():
        m = _LIST_ITEM_RE.match(line)
        if m and m.group(1):
            items.append(m.group(1))
    return items


def format_numbered_list(items: Iterable[str]) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, 1))


def proxy_token_count(text: str) -> int:
    """Token estimate used when a provider reports no usage: ceil(utf8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


# ---------------------------------------------------------------------------
# Token accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    template: str
    prompt_tokens: int
    completion_tokens: int

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class TokenLedger:
    """Thread-safe prompt/completion token totals with a per-call log.

    A ledger created with ``parent`` forwards every record to it, which lets one
    operation meter its own usage while the session-wide ledger keeps counting.
    """

    def __init__(self, parent: "TokenLedger | None" = None):
        self._lock = threading.Lock()
        self.parent = parent
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.log: list[CallRecord] = []

    def record(self, template: str, prompt_tokens: int, completion_tokens: int) -> None:
        rec = CallRecord(template, prompt_tokens, completion_tokens)
        with self._lock:
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            self.log.append(rec)
        if self.parent is not None:
            self.parent.record(template, prompt_tokens, completion_tokens)

    @property
    def total(self) -> int:
        with self._lock:
            return self.prompt_tokens + self.completion_tokens

    @property
    def calls(self) -> int:
        with self._lock:
            return len(self.log)

    def child(self) -> "TokenLedger":
        return TokenLedger(parent=self)

    def by_template(self) -> dict[str, int]:
        out: dict[str, int] = {}
        with self._lock:
            for rec in self.log:
                out[rec.template] = out.get(rec.template, 0) + rec.total
        return out


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@dataclass
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int
    flagged: bool = False

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class ChatProvider:
    kind = "abstract"

    def complete(self, system_text: str, user_text: str) -> Completion:
        raise NotImplementedError


Reply = Union[str, Callable[[str, str], str]]


@dataclass
class MockRule:
    contains: str
    reply: Reply


class MockChatProvider(ChatProvider):
    """Scripted provider: the first rule whose ``contains`` occurs in the user text wins.

    A reply may be a string or ``callable(system_text, user_text) -> str``.
    Unmatched prompts get ``default`` and are flagged.
    """

    kind = "mock"

    def __init__(self, rules: Iterable[MockRule | tuple[str, Reply]] = (), default: str = UNMATCHED_REPLY):
        self.rules = [r if isinstance(r, MockRule) else MockRule(*r) for r in rules]
        self.default = default
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.calls)

    def complete(self, system_text: str, user_text: str) -> Completion:
        with self._lock:
            self.calls.append((system_text, user_text))
        for rule in self.rules:
            if rule.contains in user_text:
                text = rule.reply(system_text, user_text) if callable(rule.reply) else rule.reply
                return Completion(text, proxy_token_count(system_text + user_text), proxy_token_count(text))
        return Completion(
            self.default, proxy_token_count(system_text + user_text), proxy_token_count(self.default), flagged=True
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockChatProvider":
        rules = [MockRule(str(r["contains"]), str(r["reply"])) for r in d.get("rules", [])]
        return cls(rules, default=str(d.get("default", UNMATCHED_REPLY)))


class RemoteChatProvider(ChatProvider):
    """OpenAI-chat-shaped HTTP endpoint; one retry on transport failure."""

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        client=None,
    ):
        import httpx

        if not endpoint:
            raise ConfigurationError("remote chat provider requires an endpoint")
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.model = model
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, system_text: str, user_text: str) -> Completion:
        import httpx

        body: dict = {
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ]
        }
        if self.model:
            body["model"] = self.model
        headers = {"Content-Type": "application/json"}
        if self.api_key_env and os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"
        last: Exception | None = None
        for attempt in range(2):
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
                resp.raise_for_status()
                payload = resp.json()
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                logger.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
        else:
            raise TransportError(f"chat endpoint unreachable: {last}")
        if "content" in payload:
            text = payload["content"]
        else:  # OpenAI "choices" shape
            text = payload["choices"][0]["message"]["content"]
        text = text or ""
        usage = payload.get("usage") or {}
        pt = usage.get("prompt_tokens")
        ct = usage.get("completion_tokens")
        return Completion(
            text,
            int(pt) if pt is not None else proxy_token_count(system_text + user_text),
            int(ct) if ct is not None else proxy_token_count(text),
        )


def complete(
    provider: ChatProvider,
    system_text: str,
    user_text: str,
    ledger: TokenLedger | None = None,
    label: str = "chat",
) -> Completion:
    """One chat call, recorded in ``ledger`` under ``label``."""
    result = provider.complete(system_text, user_text)
    if result.flagged:
        logger.info("provider reply flagged for %s call", label)
    if ledger is not None:
        ledger.record(label, result.prompt_tokens, result.completion_tokens)
    return result


def complete_template(
    provider: ChatProvider,
    template_name: str,
    bindings: Mapping[str, object],
    ledger: TokenLedger | None = None,
) -> Completion:
    system, user = render(template_name, bindings)
    return complete(provider, system, user, ledger, template_name)


@dataclass
class Providers:
    """The chat provider, embedder and session ledger an engine runs with."""

    chat: ChatProvider
    embedder: object
    ledger: TokenLedger = field(default_factory=TokenLedger)


def make_chat_provider(config: Mapping | None) -> ChatProvider:
    config = dict(config or {})
    kind = config.get("kind", "mock")
    if kind == "mock":
        return MockChatProvider.from_dict(config)
    if kind == "remote":
        return RemoteChatProvider(
            endpoint=config.get("endpoint", ""),
            api_key_env=config.get("api_key_env"),
            model=config.get("model"),
            timeout=float(config.get("timeout", 60.0)),
        )
    raise ConfigurationError(f"unknown chat provider kind {kind!r}")

