"""Model-completion backends.

Two implementations of the same contract: a deterministic table-driven
scripted backend (tests, desk-scale benchmarks) and an HTTP client for
any chat-completions-compatible server (live use). A backend is any
object with ``complete(request, iteration) -> str``.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import requests

from sage.lineio import escape, unescape

ASSISTANT = "ASSISTANT"
CHECKER = "CHECKER"
REFLECTOR = "REFLECTOR"
ROLE_TAGS = (ASSISTANT, CHECKER, REFLECTOR)

SPEAKERS = ("SYSTEM", "USER", "ASSISTANT")

# Sentinel returned when no script entry matches; lets tests spot
# prompt-construction drift instead of silently passing.
UNSCRIPTED = "UNSCRIPTED"

WILDCARD = "*"

BACKOFF_BASE_SECONDS = 0.5
BACKOFF_FACTOR = 2.0


class BackendUnavailableError(Exception):
    """Transport failure or retryable status persisted past max_retries."""


class BackendConfigError(Exception):
    """Non-retryable client error (bad key, bad request, bad response)."""


@dataclass
class Message:
    speaker: str
    text: str

    def __post_init__(self) -> None:
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}")


@dataclass
class CompletionRequest:
    role_tag: str
    messages: list[Message]
    temperature: float = 0.0
    max_output_chars: int = 4096
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role_tag {self.role_tag!r}")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must be in [0, 2]")
        if self.max_output_chars < 1:
            raise ValueError("max_output_chars must be positive")

    def prompt_text(self) -> str:
        return "\n".join(m.text for m in self.messages)


@dataclass
class ScriptEntry:
    """One canned response.

    ``iteration`` is a 1-based iteration number or ``"*"``. ``require``
    optionally restricts the entry to prompts containing that substring,
    which is what lets a script answer correctly only once some piece of
    feedback, reflection or recalled memory is actually in the prompt.
    """

    role: str
    iteration: int | str
    response: str
    require: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLE_TAGS:
            raise ValueError(f"unknown role {self.role!r}")
        if self.iteration != WILDCARD:
            if not isinstance(self.iteration, int) or self.iteration < 1:
                raise ValueError("iteration must be a positive integer or '*'")
        if not self.response:
            raise ValueError("response must be non-empty")

    def matches(self, request: CompletionRequest, iteration: int) -> bool:
        if self.role != request.role_tag:
            return False
        if self.iteration != WILDCARD and self.iteration != iteration:
            return False
        if self.require is not None and self.require not in request.prompt_text():
            return False
        return True


def scripted_complete(
    script: Sequence[ScriptEntry], request: CompletionRequest, iteration: int
) -> str:
    """First matching entry wins; exact-iteration entries are consulted
    before wildcards; no match returns the UNSCRIPTED sentinel."""
    if not script:
        raise ValueError("script must be non-empty")
    for entry in script:
        if entry.iteration != WILDCARD and entry.matches(request, iteration):
            return entry.response
    for entry in script:
        if entry.iteration == WILDCARD and entry.matches(request, iteration):
            return entry.response
    return UNSCRIPTED


class ScriptedBackend:
    """Immutable lookup table; a pure function of (script, request, iteration)."""

    def __init__(self, entries: Sequence[ScriptEntry]):
        if not entries:
            raise ValueError("script must be non-empty")
        self.entries = tuple(entries)

    def complete(self, request: CompletionRequest, iteration: int) -> str:
        return scripted_complete(self.entries, request, iteration)


# Script files are tab-separated, one entry per line:
#   ROLE<TAB>iteration-or-*<TAB>response
#   ROLE<TAB>iteration-or-*<TAB>require-substring<TAB>response
# with backslash escapes for tabs/newlines inside text fields.


def parse_script(payload: str) -> list[ScriptEntry]:
    entries = []
    for lineno, line in enumerate(payload.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) == 3:
            role, iteration, response = fields
            require = None
        elif len(fields) == 4:
            role, iteration, require, response = fields
            require = unescape(require)
        else:
            raise ValueError(f"script line {lineno}: expected 3 or 4 fields")
        entries.append(
            ScriptEntry(
                role=role,
                iteration=WILDCARD if iteration == WILDCARD else int(iteration),
                response=unescape(response),
                require=require,
            )
        )
    return entries


def dump_script(entries: Sequence[ScriptEntry]) -> str:
    lines = []
    for e in entries:
        fields = [e.role, str(e.iteration)]
        if e.require is not None:
            fields.append(escape(e.require))
        fields.append(escape(e.response))
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def load_script(path) -> ScriptedBackend:
    with open(path, encoding="utf-8") as fh:
        return ScriptedBackend(parse_script(fh.read()))


@dataclass
class HttpEndpoint:
    base_url: str
    model: str
    api_key_env: str | None = None
    timeout_ms: int = 30000
    max_retries: int = 3
    max_in_flight: int = 4


_SPEAKER_TO_WIRE = {"SYSTEM": "system", "USER": "user", "ASSISTANT": "assistant"}


class HttpBackend:
    """Chat-completions client with exponential backoff.

    Retries transport failures and HTTP 429/5xx with delays of
    0.5s, 1s, 2s, ... up to ``max_retries`` retries, then raises
    BackendUnavailableError. Any other 4xx raises BackendConfigError
    immediately. ``session`` and ``sleep`` are injectable for tests.
    """

    def __init__(
        self,
        endpoint: HttpEndpoint,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.session = session or requests.Session()
        self.sleep = sleep
        self._gate = threading.BoundedSemaphore(max(1, endpoint.max_in_flight))

    def complete(self, request: CompletionRequest, iteration: int) -> str:
        url = self.endpoint.base_url.rstrip("/") + "/v1/chat/completions"
        body = {
            "model": self.endpoint.model,
            "messages": [
                {"role": _SPEAKER_TO_WIRE[m.speaker], "content": m.text}
                for m in request.messages
            ],
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key_env:
            key = os.environ.get(self.endpoint.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"

        timeout = self.endpoint.timeout_ms / 1000.0
        attempts = self.endpoint.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                self.sleep(BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (attempt - 1))
            try:
                with self._gate:
                    resp = self.session.post(
                        url, data=json.dumps(body), headers=headers, timeout=timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendUnavailableError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendConfigError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._extract_content(resp)
        raise BackendUnavailableError(
            f"gave up after {attempts} attempts: {last_error}"
        )

    @staticmethod
    def _extract_content(resp) -> str:
        try:
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendConfigError(f"malformed completion response: {exc}") from exc


def make_backend(options: dict):
    """Build a backend from ``backend.*`` config keys."""
    kind = options.get("backend.kind", "scripted")
    if kind == "scripted":
        path = options.get("backend.script_path")
        if not path:
            raise ValueError("backend.kind=scripted requires backend.script_path")
        return load_script(path)
    if kind == "http":
        base_url = options.get("backend.base_url")
        model = options.get("backend.model")
        if not base_url or not model:
            raise ValueError("backend.kind=http requires backend.base_url and backend.model")
        endpoint = HttpEndpoint(
            base_url=base_url,
            model=model,
            api_key_env=options.get("backend.api_key_env"),
            timeout_ms=int(options.get("backend.timeout_ms", 30000)),
            max_retries=int(options.get("backend.max_retries", 3)),
            max_in_flight=int(options.get("backend.max_in_flight", 4)),
        )
        return HttpBackend(endpoint)
    raise ValueError(f"unknown backend.kind {kind!r}")
