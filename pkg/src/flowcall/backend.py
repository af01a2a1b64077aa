"""LLM backends: an OpenAI-compatible live client and a deterministic scripted one.

Both expose a single ``complete(request)`` call returning a BackendResponse
that is either a function-call choice or a final stop. The scripted backend
replays a rule table against the latest user message and is the test oracle
for every conversation-level property in this package.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import httpx

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .conversation import Message
    from .registry import FunctionDescriptor

BASE_URL_ENV = "FLOWCALL_API_BASE"
API_KEY_ENV = "FLOWCALL_API_KEY"
MODEL_ENV = "FLOWCALL_MODEL"
DEFAULT_MODEL = "gpt-4"

FUNCTION_CALL = "function_call"
FINAL = "final"


class BackendError(RuntimeError):
    """Base class for backend failures."""


class TransportError(BackendError):
    """The request never produced a usable HTTP response; safe to retry."""


class ProtocolError(BackendError):
    """The endpoint answered with something outside the wire protocol."""


class ScriptError(ValueError):
    """A script document failed to parse or validate."""


class NoMatchingRuleError(BackendError):
    """No script rule matched the latest user message."""


@dataclass(frozen=True)
class BackendResponse:
    """Either a function-call choice or a final stop."""

    kind: str
    name: str | None = None
    raw_args: str | None = None
    content: str = ""

    @property
    def stop(self) -> bool:
        return self.kind == FINAL

    @classmethod
    def function_call(cls, name: str, raw_args: str) -> "BackendResponse":
        return cls(kind=FUNCTION_CALL, name=name, raw_args=raw_args)

    @classmethod
    def final(cls, content: str) -> "BackendResponse":
        return cls(kind=FINAL, content=content)


@dataclass(frozen=True)
class BackendRequest:
    model: str
    messages: tuple["Message", ...]
    functions: tuple["FunctionDescriptor", ...]
    temperature: float = 0.0


@dataclass(frozen=True)
class ScriptRule:
    """One scripted behavior: a match predicate plus a canned response.

    Exactly one of ``substring``/``pattern``/``always`` selects the rule;
    pattern rules may reference capture groups as ``${1}``, ``${2}``, ... in
    the response's argument values and final content.
    """

    substring: str | None = None
    pattern: str | None = None
    always: bool = False
    function: str | None = None
    arguments: str | None = None  # raw argument text, template-expanded
    final: str | None = None
    consume_once: bool = False

    def matches(self, text: str) -> re.Match | bool | None:
        if self.always:
            return True
        if self.substring is not None:
            return self.substring in text
        return re.search(self.pattern or "", text)


@dataclass(frozen=True)
class Script:
    rules: tuple[ScriptRule, ...]


_GROUP_REF = re.compile(r"\$\{(\d+)\}")


def _expand(template: str, match: re.Match | bool | None) -> str:
    if not isinstance(match, re.Match):
        return template
    return _GROUP_REF.sub(lambda m: match.group(int(m.group(1))) or "", template)


def _parse_rule(obj: dict, idx: int) -> ScriptRule:
    ctx = f"rule {idx}"
    if not isinstance(obj, dict):
        raise ScriptError(f"{ctx}: must be an object")
    match = obj.get("match")
    if not isinstance(match, dict):
        raise ScriptError(f"{ctx}: missing 'match' object")
    forms = [k for k in ("substring", "pattern", "always") if k in match]
    if len(forms) != 1:
        raise ScriptError(f"{ctx}: match needs exactly one of substring/pattern/always")
    respond = obj.get("respond")
    if not isinstance(respond, dict):
        raise ScriptError(f"{ctx}: missing 'respond' object")

    function = respond.get("function")
    final = respond.get("final")
    if (function is None) == (final is None):
        raise ScriptError(f"{ctx}: respond needs exactly one of 'function' or 'final'")
    arguments = None
    if function is not None:
        if "raw_arguments" in respond:
            arguments = respond["raw_arguments"]
            if not isinstance(arguments, str):
                raise ScriptError(f"{ctx}: raw_arguments must be a string")
        else:
            arguments = json.dumps(respond.get("arguments", {}))
    pattern = match.get("pattern")
    if pattern is not None:
        try:
            re.compile(pattern)
        except re.error as exc:
            raise ScriptError(f"{ctx}: bad pattern: {exc}") from exc
    return ScriptRule(
        substring=match.get("substring"),
        pattern=pattern,
        always=bool(match.get("always", False)),
        function=function,
        arguments=arguments,
        final=final,
        consume_once=bool(obj.get("consume_once", False)),
    )


def load_script(script_text: str) -> Script:
    """Parse a script document; see docs/scripts.md for the format.

    A valid script has at least one rule, and at least one non-consumable
    always-matching rule so every conversation can terminate.
    """
    try:
        doc = json.loads(script_text)
    except json.JSONDecodeError as exc:
        raise ScriptError(f"script parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise ScriptError("script must be an object with a 'rules' list")
    raw_rules = doc["rules"]
    if not raw_rules:
        raise ScriptError("script has zero rules")
    rules = tuple(_parse_rule(r, i) for i, r in enumerate(raw_rules))
    if not any(r.always and not r.consume_once for r in rules):
        raise ScriptError("script needs a default rule (always-match, not consume_once)")
    return Script(rules=rules)


def load_script_file(path: str) -> Script:
    with open(path, encoding="utf-8") as fh:
        return load_script(fh.read())


class ScriptedBackend:
    """Deterministic backend driven by an ordered rule table.

    Rules are evaluated in order against the latest user message; the first
    match fires. A consume_once rule is skipped after it has fired once.
    """

    def __init__(self, script: Script):
        self._script = script
        self._consumed: set[int] = set()
        self._lock = threading.Lock()

    def complete(self, request: BackendRequest) -> BackendResponse:
        latest = ""
        for message in reversed(request.messages):
            if message.role == "user":
                latest = message.content
                break
        with self._lock:
            for idx, rule in enumerate(self._script.rules):
                if idx in self._consumed:
                    continue
                match = rule.matches(latest)
                if not match:
                    continue
                if rule.consume_once:
                    self._consumed.add(idx)
                if rule.function is not None:
                    return BackendResponse.function_call(
                        _expand(rule.function, match), _expand(rule.arguments or "{}", match)
                    )
                return BackendResponse.final(_expand(rule.final or "", match))
        raise NoMatchingRuleError(f"no script rule matches message: {latest[:120]!r}")


class LiveBackend:
    """Client for the chat-completions function-calling wire protocol.

    Reads the endpoint base URL, credential, and model from the environment
    unless given explicitly. Never persists the credential.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 60.0,
        transport_retries: int = 2,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        if not self.base_url:
            raise BackendError(f"no endpoint configured; set {BASE_URL_ENV}")
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._retries = transport_retries
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def close(self):
        self._client.close()

    def _payload(self, request: BackendRequest) -> dict:
        messages = []
        for m in request.messages:
            entry: dict = {"role": m.role, "content": m.content}
            if m.function_call is not None:
                entry["content"] = m.content or None
                entry["function_call"] = {
                    "name": m.function_call.name,
                    "arguments": m.function_call.arguments,
                }
            messages.append(entry)
        return {
            "model": request.model,
            "messages": messages,
            "functions": [d.to_wire() for d in request.functions],
            "temperature": request.temperature,
        }

    def complete(self, request: BackendRequest) -> BackendResponse:
        url = f"{self.base_url}/chat/completions"
        payload = self._payload(request)
        attempt = 0
        while True:
            try:
                http_response = self._client.post(url, json=payload)
                break
            except httpx.HTTPError as exc:
                attempt += 1
                if attempt > self._retries:
                    raise TransportError(f"request to {url} failed: {exc}") from exc
                time.sleep(0.5 * 2 ** (attempt - 1))
        if http_response.status_code != 200:
            raise ProtocolError(
                f"endpoint returned HTTP {http_response.status_code}: "
                f"{http_response.text[:200]}"
            )
        try:
            body = http_response.json()
            choice = body["choices"][0]
            message = choice["message"]
        except (ValueError, LookupError, TypeError) as exc:
            raise ProtocolError(f"malformed completion body: {exc}") from exc
        function_call = message.get("function_call")
        if function_call is not None:
            try:
                return BackendResponse.function_call(
                    function_call["name"], function_call["arguments"]
                )
            except (KeyError, TypeError) as exc:
                raise ProtocolError(f"malformed function_call object: {exc}") from exc
        finish = choice.get("finish_reason")
        if finish not in (None, "stop"):
            raise ProtocolError(f"unexpected finish_reason {finish!r} without function call")
        return BackendResponse.final(message.get("content") or "")


def make_backend(spec: str, *, script_loader=load_script_file):
    """Build a backend from a CLI/service spec: `live` or `script:<path>`."""
    if spec == "live":
        return LiveBackend()
    if spec.startswith("script:"):
        return ScriptedBackend(script_loader(spec.split(":", 1)[1]))
    raise ValueError(f"unknown backend spec {spec!r}; use 'live' or 'script:<path>'")
