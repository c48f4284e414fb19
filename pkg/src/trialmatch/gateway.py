"""Pluggable model backend with schema-enforced structured output.

Every call declares an output schema; responses are validated and retried
with the violation appended to the prompt, so callers only ever see typed
values.  Ships a deterministic scripted mock backend for tests and offline
runs.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import requests

logger = logging.getLogger(__name__)

MAX_SCHEMA_DEPTH = 4
DEFAULT_MAX_RETRIES = 2
TOKEN_ENV_VAR = "TRIALMATCH_LLM_TOKEN"


class SchemaViolation(Exception):
    """Backend output failed schema validation on every attempt."""

    def __init__(self, violations: Sequence["Violation"], attempts: int):
        detail = "; ".join(f"{v.path or '<root>'}: {v.message}" for v in violations) or "no value produced"
        super().__init__(f"output invalid after {attempts} attempt(s): {detail}")
        self.violations = list(violations)
        self.attempts = attempts


class BackendUnavailable(Exception):
    """Remote backend could not be reached or answered unusable transport-level data."""


class ScriptExhausted(Exception):
    """The scripted mock ran out of responses for a task tag."""


class TaskTag(Enum):
    EXTRACT_QUERY = "EXTRACT_QUERY"
    REWRITE_QUERIES = "REWRITE_QUERIES"
    SCREEN_RELEVANCE = "SCREEN_RELEVANCE"
    STRUCTURE_CRITERIA = "STRUCTURE_CRITERIA"
    EVALUATE_CRITERION = "EVALUATE_CRITERION"


# ---------------------------------------------------------------------------
# Output schemas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path or '<root>'}: {self.message}"


@dataclass(frozen=True)
class EnumSchema:
    choices: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(set(self.choices)) < 2:
            raise ValueError("an enum schema needs at least 2 distinct members")


@dataclass(frozen=True)
class BoolSchema:
    pass


@dataclass(frozen=True)
class TextSchema:
    pass


@dataclass(frozen=True)
class NumberSchema:
    pass


@dataclass(frozen=True)
class RecordField:
    name: str
    schema: "OutputSchema"
    required: bool = True


@dataclass(frozen=True)
class ListSchema:
    item: "OutputSchema"

    def __post_init__(self) -> None:
        _check_depth(self)


@dataclass(frozen=True)
class RecordSchema:
    fields: tuple[RecordField, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("record field names must be unique")
        _check_depth(self)

    def field_map(self) -> dict[str, RecordField]:
        return {f.name: f for f in self.fields}


OutputSchema = Union[EnumSchema, BoolSchema, TextSchema, NumberSchema, ListSchema, RecordSchema]


def schema_depth(schema: OutputSchema) -> int:
    """Nesting depth: scalars are 0, each list/record layer adds 1."""
    if isinstance(schema, ListSchema):
        return 1 + schema_depth(schema.item)
    if isinstance(schema, RecordSchema):
        return 1 + max((schema_depth(f.schema) for f in schema.fields), default=0)
    return 0


def _check_depth(schema: OutputSchema) -> None:
    depth = schema_depth(schema)
    if depth > MAX_SCHEMA_DEPTH:
        raise ValueError(f"schema nesting depth {depth} exceeds the maximum of {MAX_SCHEMA_DEPTH}")


def describe_schema(schema: OutputSchema) -> str:
    """Compact human/model-readable schema description used in prompts."""
    if isinstance(schema, EnumSchema):
        return "one of " + " | ".join(json.dumps(c) for c in schema.choices)
    if isinstance(schema, BoolSchema):
        return "true | false"
    if isinstance(schema, TextSchema):
        return "string"
    if isinstance(schema, NumberSchema):
        return "number"
    if isinstance(schema, ListSchema):
        return f"[{describe_schema(schema.item)}, ...]"
    if isinstance(schema, RecordSchema):
        parts = []
        for f in schema.fields:
            suffix = "" if f.required else "?"
            parts.append(f"{json.dumps(f.name)}{suffix}: {describe_schema(f.schema)}")
        return "{" + ", ".join(parts) + "}"
    raise TypeError(f"not a schema: {schema!r}")


def validate(value: Any, schema: OutputSchema, path: str = "") -> list[Violation]:
    """Structural conformance check.  An empty list means ok; violations
    carry a path like ".reasoning" or "[2].verdict"."""
    if isinstance(schema, EnumSchema):
        if not isinstance(value, str):
            return [Violation(path, f"expected an enum string, got {type(value).__name__}")]
        if value not in schema.choices:
            allowed = ", ".join(schema.choices)
            return [Violation(path, f"{value!r} is not one of [{allowed}]")]
        return []
    if isinstance(schema, BoolSchema):
        if not isinstance(value, bool):
            return [Violation(path, f"expected a boolean, got {type(value).__name__}")]
        return []
    if isinstance(schema, TextSchema):
        if not isinstance(value, str):
            return [Violation(path, f"expected a string, got {type(value).__name__}")]
        return []
    if isinstance(schema, NumberSchema):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return [Violation(path, f"expected a number, got {type(value).__name__}")]
        if isinstance(value, float) and not math.isfinite(value):
            return [Violation(path, "number must be finite")]
        return []
    if isinstance(schema, ListSchema):
        if not isinstance(value, list):
            return [Violation(path, f"expected a list, got {type(value).__name__}")]
        violations: list[Violation] = []
        for i, item in enumerate(value):
            violations.extend(validate(item, schema.item, f"{path}[{i}]"))
        return violations
    if isinstance(schema, RecordSchema):
        if not isinstance(value, dict):
            return [Violation(path, f"expected a record, got {type(value).__name__}")]
        violations = []
        fields = schema.field_map()
        for name, f in fields.items():
            if name not in value:
                if f.required:
                    violations.append(Violation(f"{path}.{name}", "missing required field"))
                continue
            violations.extend(validate(value[name], f.schema, f"{path}.{name}"))
        for name in value:
            if name not in fields:
                violations.append(Violation(f"{path}.{name}", "unexpected field"))
        return violations
    raise TypeError(f"not a schema: {schema!r}")


# ---------------------------------------------------------------------------
# Requests and backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptSection:
    label: str
    text: str


@dataclass(frozen=True)
class GatewayRequest:
    task_tag: TaskTag
    sections: tuple[PromptSection, ...]
    schema: OutputSchema

    def __post_init__(self) -> None:
        object.__setattr__(self, "sections", tuple(self.sections))
        if not any(s.label == "instruction" for s in self.sections):
            raise ValueError("a gateway request must carry an instruction section")


def render_prompt(request: GatewayRequest) -> str:
    """Deterministic prompt assembly: labeled blocks plus the output schema."""
    blocks = [f"## {section.label}\n{section.text}" for section in request.sections]
    blocks.append(f"## output schema\nRespond with a single value of this shape:\n{describe_schema(request.schema)}")
    return "\n\n".join(blocks)


class BackendKind(Enum):
    REMOTE_HTTP = "REMOTE_HTTP"
    SCRIPTED_MOCK = "SCRIPTED_MOCK"


@dataclass
class BackendConfig:
    """Backend wiring plus, for the mock, the mutable response script.

    Mock scripts are ordered queues per task tag, consumed under a lock so
    the mock stays deterministic even with concurrent callers.
    """

    kind: BackendKind
    endpoint: str = ""
    model: str = ""
    auth_env_var: str = TOKEN_ENV_VAR
    max_retries: int = DEFAULT_MAX_RETRIES
    timeout_seconds: float = 60.0
    temperature: Optional[float] = None
    script: Mapping[Any, Sequence[Any]] = field(default_factory=dict)
    audit_path: Optional[str] = None
    max_concurrency: Optional[int] = None
    requests_per_minute: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        queues: dict[TaskTag, deque] = {}
        for tag, responses in self.script.items():
            key = tag if isinstance(tag, TaskTag) else TaskTag(str(tag))
            queues[key] = deque(responses)
        self._queues = queues
        self._lock = threading.Lock()
        self._semaphore = threading.BoundedSemaphore(self.max_concurrency) if self.max_concurrency else None
        self._request_times: deque[float] = deque()

    # -- mock ---------------------------------------------------------------
    def _pop_scripted(self, tag: TaskTag) -> Any:
        with self._lock:
            queue = self._queues.get(tag)
            if not queue:
                raise ScriptExhausted(f"no scripted response left for {tag.value}")
            return queue.popleft()

    def remaining_script(self, tag: TaskTag) -> int:
        with self._lock:
            return len(self._queues.get(tag, ()))

    # -- remote ---------------------------------------------------------------
    def _call_remote(self, prompt: str) -> str:
        token = os.environ.get(self.auth_env_var, "")
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body: dict[str, Any] = {"messages": [{"role": "user", "content": prompt}]}
        if self.model:
            body["model"] = self.model
        if self.temperature is not None:
            body["temperature"] = self.temperature
        try:
            resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout_seconds)
        except requests.RequestException as exc:
            raise BackendUnavailable(f"backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailable(f"backend returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"backend response not in chat-completion shape: {exc}") from exc

    def _throttle(self) -> None:
        if self.requests_per_minute is None:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                while self._request_times and now - self._request_times[0] > 60.0:
                    self._request_times.popleft()
                if len(self._request_times) < self.requests_per_minute:
                    self._request_times.append(now)
                    return
                wait = 60.0 - (now - self._request_times[0])
            time.sleep(max(wait, 0.01))

    def invoke(self, tag: TaskTag, prompt: str) -> Any:
        self._throttle()
        if self._semaphore is not None:
            with self._semaphore:
                return self._invoke_inner(tag, prompt)
        return self._invoke_inner(tag, prompt)

    def _invoke_inner(self, tag: TaskTag, prompt: str) -> Any:
        if self.kind is BackendKind.SCRIPTED_MOCK:
            return self._pop_scripted(tag)
        return self._call_remote(prompt)

    def audit(self, tag: TaskTag, attempt: int, prompt: str, response: Any) -> None:
        if not self.audit_path:
            return
        entry = {
            "task_tag": tag.value,
            "attempt": attempt,
            "prompt": prompt,
            "response": response if isinstance(response, (str, int, float, bool, type(None))) else json.dumps(response),
            "time": time.time(),
        }
        with self._lock:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.DOTALL)
_INT_RE = re.compile(r"^-?\d+$")
_NUM_RE = re.compile(r"^-?\d+(\.\d+)?([eE][+-]?\d+)?$")


def _first_document(text: str) -> Optional[Any]:
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text, i)
                return value
            except json.JSONDecodeError:
                continue
    return None


def parse_structured_text(text: str, schema: OutputSchema) -> Any:
    """Extract the structured value from backend text.

    Leading/trailing prose is tolerated: the first balanced JSON document
    wins.  For scalar schemas, a bare token (optionally quoted) is accepted.
    """
    stripped = text.strip()
    fence = _FENCE_RE.search(stripped)
    if fence:
        stripped = fence.group(1).strip()

    if isinstance(schema, (EnumSchema, TextSchema)):
        bare = stripped
        if len(bare) >= 2 and bare[0] == bare[-1] and bare[0] in "'\"":
            bare = bare[1:-1]
        if not validate(bare, schema):
            return bare
    if isinstance(schema, BoolSchema) and stripped.lower() in ("true", "false"):
        return stripped.lower() == "true"
    if isinstance(schema, NumberSchema) and _NUM_RE.match(stripped):
        return int(stripped) if _INT_RE.match(stripped) else float(stripped)

    document = _first_document(stripped)
    if document is not None:
        return document

    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    if isinstance(schema, (EnumSchema, TextSchema)):
        bare = stripped
        if len(bare) >= 2 and bare[0] == bare[-1] and bare[0] in "'\"":
            bare = bare[1:-1]
        return bare
    return stripped


# ---------------------------------------------------------------------------
# The structured-completion loop
# ---------------------------------------------------------------------------

PostValidator = Callable[[Any], list[Violation]]


def complete_structured(
    request: GatewayRequest,
    backend: BackendConfig,
    post_validate: Optional[PostValidator] = None,
) -> Any:
    """Run one structured completion: invoke, parse, validate, retry.

    On violation the request is retried up to backend.max_retries times with
    the violation text appended to the prompt.  Raises SchemaViolation when
    all attempts are exhausted; the returned value always re-validates ok.
    """
    sections = list(request.sections)
    attempts = backend.max_retries + 1
    last_violations: list[Violation] = []
    for attempt in range(1, attempts + 1):
        attempt_request = GatewayRequest(request.task_tag, tuple(sections), request.schema)
        prompt = render_prompt(attempt_request)
        raw = backend.invoke(request.task_tag, prompt)
        backend.audit(request.task_tag, attempt, prompt, raw)
        value = parse_structured_text(raw, request.schema) if isinstance(raw, str) else raw
        violations = validate(value, request.schema)
        if not violations and post_validate is not None:
            violations = list(post_validate(value))
        if not violations:
            return value
        last_violations = violations
        feedback = "The previous response was invalid:\n" + "\n".join(str(v) for v in violations)
        sections.append(PromptSection("validation feedback", feedback))
        logger.debug("%s attempt %d invalid: %s", request.task_tag.value, attempt, feedback)
    raise SchemaViolation(last_violations, attempts)


def load_template(tag: TaskTag) -> str:
    """Load the versioned prompt template for a task tag (templates are data)."""
    name = f"{tag.value.lower()}.txt"
    return resources.files("trialmatch.templates").joinpath(name).read_text(encoding="utf-8")
