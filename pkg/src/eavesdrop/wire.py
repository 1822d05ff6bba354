"""Wire protocol shared by the judge, generator and policy clients.

Every exchange is one request document and one response document, both
JSON. Images travel as base64 of binary PPM bytes. Field names are frozen
in ``schemas/wire-v1.json``; the pydantic models below are the parsers.

Transports:

* :class:`AgentTransport` talks to an LLM endpoint through the Claude Agent
  SDK (one ``query()`` per request, no tools, one turn).
* :class:`ScriptedTransport` replays canned responses for tests and offline
  runs.
"""

from __future__ import annotations

import base64
import binascii
import itertools
import json
import re
from collections.abc import Callable, Sequence
from contextlib import aclosing
from typing import Annotated, Any, ClassVar, Literal, Protocol, TypeVar

import anyio
import click
from pydantic import BaseModel, ConfigDict, Field, StrictBool, ValidationError

from eavesdrop.errors import (
    PpmFormatError,
    SchemaViolationError,
    ServiceUnavailableError,
    TransportError,
    WireError,
)
from eavesdrop.image import Image, decode_ppm, encode_ppm
from eavesdrop.paths import _read_prompt

SCHEMA_VERSION = "1"
MAX_TEXT = 300

UnitFloat = Annotated[float, Field(ge=0.0, le=1.0, allow_inf_nan=False)]


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ── Requests ─────────────────────────────────────────────────────────────────


class WireRequest(_Document):
    """Judge (assess, describe) and generator (generate) request."""

    schema_version: Literal["1"] = SCHEMA_VERSION
    task: Literal["assess", "describe", "generate"]
    image: str
    prompt: str
    request_id: str


class StateSummary(_Document):
    """What a policy sees about the attack after each burst."""

    mode: Literal["ImageOnly", "ChannelOnly", "Joint"]
    session_id: str
    improvement: float = Field(allow_inf_nan=False)
    improving: StrictBool
    fused: UnitFloat
    fused_best: UnitFloat
    fused_drop: float = Field(allow_inf_nan=False)
    plausible: StrictBool
    stagnant: StrictBool
    switches_exhausted: StrictBool
    steps_left: int = Field(ge=0)
    branches_left: int = Field(ge=0)
    refinements_left: int = Field(ge=0)
    best_checkpoint_id: str | None = None
    best_candidate_id: int | None = None
    checkpoint_ids: list[str] = Field(default_factory=list)


class PolicyRequest(_Document):
    schema_version: Literal["1"] = SCHEMA_VERSION
    request_id: str
    summary: StateSummary


# ── Responses ────────────────────────────────────────────────────────────────


class VisualEvidence(_Document):
    """Structured judge verdict on one reconstruction.

    ``auxiliary`` (glasses, background, hairstyle, ...) is descriptive only
    and never enters the evidence score.
    """

    schema_version: Literal["1"]
    face_visible: StrictBool
    pose: Literal["frontal", "profile", "other", "none"]
    components_complete: UnitFloat
    artifacts_present: StrictBool
    artifact_severity: UnitFloat
    artifact_descriptions: list[str]
    confidence: UnitFloat
    auxiliary: dict[str, str] = Field(default_factory=dict)
    request_id: str | None = None


ShortText = Annotated[str, Field(min_length=1, max_length=MAX_TEXT)]


class AttributeDescription(_Document):
    """Caption of a candidate, used to compose the restoration prompt."""

    schema_version: Literal["1"]
    identity_cues: ShortText
    appearance: ShortText
    pose: ShortText
    lighting: ShortText
    background: ShortText
    quality_issues: ShortText
    request_id: str | None = None

    ATTRIBUTES: ClassVar[tuple[str, ...]] = (
        "identity_cues",
        "appearance",
        "pose",
        "lighting",
        "background",
        "quality_issues",
    )


class GenerateResponse(_Document):
    schema_version: Literal["1"]
    image: str
    request_id: str | None = None


ActionName = Literal[
    "continue", "switch", "rollback", "terminate_and_branch", "refine", "finalize"
]


class PolicyResponse(_Document):
    schema_version: Literal["1"]
    action: ActionName
    parameters: dict[str, str | int | float] = Field(default_factory=dict)
    request_id: str | None = None


RESPONSE_MODELS: dict[str, type[_Document]] = {
    "assess": VisualEvidence,
    "describe": AttributeDescription,
    "generate": GenerateResponse,
    "policy": PolicyResponse,
}

D = TypeVar("D", bound=_Document)


# ── Parsing ──────────────────────────────────────────────────────────────────

_FENCE_RE = re.compile(r"^\s*```(?:json)?\s*\n(.*?)\n\s*```\s*$", re.DOTALL)


def parse_response(model: type[D], text: str) -> D:
    """Strict parse of one response document.

    A surrounding Markdown code fence is tolerated. Any violation raises
    SchemaViolationError naming the first offending field.
    """
    match = _FENCE_RE.match(text)
    if match:
        text = match.group(1)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolationError(f"Response is not JSON ({exc.msg})", "<document>") from exc
    if not isinstance(obj, dict):
        raise SchemaViolationError("Response is not a JSON object", "<document>")
    try:
        return model.model_validate(obj)
    except ValidationError as exc:
        first = exc.errors()[0]
        name = ".".join(str(p) for p in first["loc"]) or "<document>"
        raise SchemaViolationError(f"{model.__name__}: {first['msg']}", name) from exc


def encode_image(x: Image) -> str:
    return base64.b64encode(encode_ppm(x)).decode("ascii")


def decode_image(payload: str) -> Image:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise SchemaViolationError("Image is not valid base64", "image") from exc
    try:
        return decode_ppm(raw)
    except PpmFormatError as exc:
        raise SchemaViolationError(f"Image is not a valid PPM ({exc.message})", "image") from exc


# ── Transports ───────────────────────────────────────────────────────────────

Request = WireRequest | PolicyRequest


class Transport(Protocol):
    async def exchange(self, request: Request) -> str: ...


_ENV_BASE_URL = "ANTHROPIC_BASE_URL"


class AgentTransport:
    """One request/response exchange through the Claude Agent SDK.

    The request document is sent verbatim as the prompt; the system prompt
    comes from ``prompts/<system_prompt>``. ``endpoint`` (when set) is
    passed to the SDK as its base URL.
    """

    def __init__(
        self,
        system_prompt: str,
        *,
        endpoint: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
    ):
        self.system_prompt = system_prompt
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout

    def _options(self):
        from claude_agent_sdk import ClaudeAgentOptions

        env = {_ENV_BASE_URL: self.endpoint} if self.endpoint else {}
        return ClaudeAgentOptions(
            system_prompt=_read_prompt(self.system_prompt),
            allowed_tools=[],
            max_turns=1,
            model=self.model,
            env=env,
        )

    async def exchange(self, request: Request) -> str:
        from claude_agent_sdk import ResultMessage, query

        result_msg = None
        try:
            with anyio.fail_after(self.timeout):
                async with aclosing(
                    query(prompt=request.model_dump_json(), options=self._options())
                ) as stream:
                    async for message in stream:
                        if isinstance(message, ResultMessage):
                            result_msg = message
        except TimeoutError as exc:
            raise TransportError(f"No answer within {self.timeout:g}s") from exc
        except WireError:
            raise
        except Exception as exc:
            raise TransportError(f"Exchange failed: {exc}") from exc

        if not result_msg:
            raise TransportError("No result returned from agent")
        if result_msg.is_error:
            raise TransportError(f"Agent reported an error: {result_msg.result}")
        return result_msg.result or ""


ScriptItem = str | BaseException | Callable[[Request], str]


class ScriptedTransport:
    """Replays ``script`` in order; exceptions in the script are raised.

    Every request seen is kept in ``requests`` for assertions.
    """

    def __init__(self, script: Sequence[ScriptItem], *, cycle: bool = False):
        self._items = itertools.cycle(script) if cycle else iter(script)
        self.requests: list[Request] = []

    async def exchange(self, request: Request) -> str:
        self.requests.append(request)
        try:
            item = next(self._items)
        except StopIteration:
            raise TransportError("Scripted transport has no responses left") from None
        if isinstance(item, BaseException):
            raise item
        if callable(item):
            return item(request)
        return item


# ── Client ───────────────────────────────────────────────────────────────────


class WireClient:
    """Retrying, concurrency-bounded client over one transport.

    Transport failures are retried ``retries`` times and then surface as
    ``unavailable_error``. Schema violations are never retried.
    """

    def __init__(
        self,
        transport: Transport,
        *,
        name: str,
        retries: int = 2,
        max_in_flight: int = 4,
        unavailable_error: type[ServiceUnavailableError] = ServiceUnavailableError,
    ):
        self.transport = transport
        self.name = name
        self.retries = retries
        self.unavailable_error = unavailable_error
        self._limiter = anyio.CapacityLimiter(max_in_flight)
        self._ids = itertools.count()

    def next_request_id(self, task: str) -> str:
        return f"{self.name}-{task}-{next(self._ids)}"

    async def call(self, request: Request, model: type[D]) -> D:
        attempts = self.retries + 1
        last: TransportError | None = None
        for attempt in range(1, attempts + 1):
            try:
                async with self._limiter:
                    text = await self.transport.exchange(request)
            except TransportError as exc:
                last = exc
                click.echo(
                    f"[eavesdrop] {self.name}: attempt {attempt}/{attempts} failed: {exc.message}",
                    err=True,
                )
                continue
            doc = parse_response(model, text)
            rid = getattr(doc, "request_id", None)
            if rid is not None and rid != request.request_id:
                raise SchemaViolationError(
                    f"Response answers '{rid}', expected '{request.request_id}'", "request_id"
                )
            return doc
        raise self.unavailable_error(
            f"{self.name} unavailable after {attempts} attempt(s): "
            f"{last.message if last else 'no attempt made'}"
        )

    async def image_task(
        self, task: Literal["assess", "describe", "generate"], x: Image, prompt: str
    ) -> Any:
        request = WireRequest(
            task=task, image=encode_image(x), prompt=prompt, request_id=self.next_request_id(task)
        )
        return await self.call(request, RESPONSE_MODELS[task])

    async def policy(self, summary: StateSummary) -> PolicyResponse:
        request = PolicyRequest(request_id=self.next_request_id("policy"), summary=summary)
        return await self.call(request, PolicyResponse)
