"""Tests for the wire documents, image payloads, transports and the retrying client."""

from __future__ import annotations

import json
import os
from pathlib import Path
from unittest.mock import patch

import anyio
import claude_agent_sdk
import numpy as np
import pytest

from eavesdrop.errors import (
    JudgeUnavailableError,
    SchemaViolationError,
    ServiceUnavailableError,
    TransportError,
)
from eavesdrop.wire import (
    AgentTransport,
    PolicyResponse,
    ScriptedTransport,
    StateSummary,
    VisualEvidence,
    WireClient,
    WireRequest,
    decode_image,
    encode_image,
    parse_response,
)

EVIDENCE = {
    "schema_version": "1",
    "face_visible": True,
    "pose": "frontal",
    "components_complete": 0.8,
    "artifacts_present": False,
    "artifact_severity": 0.0,
    "artifact_descriptions": [],
    "confidence": 0.9,
}


def _result(text: str, *, is_error: bool = False):
    return claude_agent_sdk.ResultMessage(
        subtype="result",
        duration_ms=100,
        duration_api_ms=80,
        is_error=is_error,
        num_turns=1,
        session_id="test",
        result=text,
    )


def _request(request_id: str = "judge-assess-0") -> WireRequest:
    return WireRequest(task="assess", image="", prompt="look", request_id=request_id)


# ── Parsing ──────────────────────────────────────────────────────────────────


class TestParseResponse:
    def test_valid_evidence(self):
        ev = parse_response(VisualEvidence, json.dumps(EVIDENCE))
        assert ev.face_visible is True
        assert ev.auxiliary == {}

    def test_code_fence_tolerated(self):
        text = "```json\n" + json.dumps(EVIDENCE) + "\n```"
        assert parse_response(VisualEvidence, text).confidence == 0.9

    def test_not_json(self):
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(VisualEvidence, "the face looks fine")
        assert exc.value.field == "<document>"

    def test_not_an_object(self):
        with pytest.raises(SchemaViolationError, match="object"):
            parse_response(VisualEvidence, "[1, 2]")

    def test_unknown_field_rejected(self):
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(VisualEvidence, json.dumps({**EVIDENCE, "mood": "happy"}))
        assert exc.value.field == "mood"

    def test_out_of_range_names_field(self):
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(VisualEvidence, json.dumps({**EVIDENCE, "confidence": 1.5}))
        assert exc.value.field == "confidence"
        assert "field 'confidence'" in exc.value.message

    def test_string_bool_rejected(self):
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(VisualEvidence, json.dumps({**EVIDENCE, "face_visible": "yes"}))
        assert exc.value.field == "face_visible"

    def test_wrong_schema_version(self):
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(VisualEvidence, json.dumps({**EVIDENCE, "schema_version": "2"}))
        assert exc.value.field == "schema_version"

    def test_policy_parameters(self):
        doc = {"schema_version": "1", "action": "switch", "parameters": {"mode": "ImageOnly"}}
        resp = parse_response(PolicyResponse, json.dumps(doc))
        assert resp.action == "switch"
        assert resp.parameters == {"mode": "ImageOnly"}

    def test_unknown_action(self):
        doc = {"schema_version": "1", "action": "explode"}
        with pytest.raises(SchemaViolationError) as exc:
            parse_response(PolicyResponse, json.dumps(doc))
        assert exc.value.field == "action"

    def test_summary_rejects_negative_budget(self):
        with pytest.raises(ValueError):
            StateSummary(
                mode="Joint",
                session_id="s0",
                improvement=0.0,
                improving=False,
                fused=0.5,
                fused_best=0.5,
                fused_drop=0.0,
                plausible=True,
                stagnant=False,
                switches_exhausted=False,
                steps_left=-1,
                branches_left=0,
                refinements_left=0,
            )


# ── Image payloads ───────────────────────────────────────────────────────────


class TestImagePayload:
    def test_encode_decode(self):
        x = np.rint(np.linspace(0.0, 1.0, 48).reshape(3, 4, 4) * 255.0) / 255.0
        assert np.allclose(decode_image(encode_image(x)), x)

    def test_bad_base64(self):
        with pytest.raises(SchemaViolationError) as exc:
            decode_image("not base64!!")
        assert exc.value.field == "image"

    def test_bad_ppm(self):
        import base64

        with pytest.raises(SchemaViolationError, match="PPM"):
            decode_image(base64.b64encode(b"P5 1 1 255\n\x00").decode())


# ── Client ───────────────────────────────────────────────────────────────────


class TestWireClient:
    @pytest.mark.anyio
    async def test_request_ids_are_sequential(self):
        transport = ScriptedTransport([json.dumps(EVIDENCE)], cycle=True)
        client = WireClient(transport, name="judge")
        x = np.full((3, 4, 4), 0.5)
        await client.image_task("assess", x, "p")
        await client.image_task("assess", x, "p")
        assert [r.request_id for r in transport.requests] == ["judge-assess-0", "judge-assess-1"]
        assert transport.requests[0].schema_version == "1"

    @pytest.mark.anyio
    async def test_transport_failures_are_retried(self):
        transport = ScriptedTransport(
            [TransportError("reset"), TransportError("reset"), json.dumps(EVIDENCE)]
        )
        client = WireClient(transport, name="judge", retries=2)
        ev = await client.call(_request(), VisualEvidence)
        assert ev.pose == "frontal"
        assert len(transport.requests) == 3

    @pytest.mark.anyio
    async def test_exhausted_retries_raise_configured_error(self):
        transport = ScriptedTransport([TransportError("down")], cycle=True)
        client = WireClient(
            transport, name="judge", retries=1, unavailable_error=JudgeUnavailableError
        )
        with pytest.raises(JudgeUnavailableError, match="2 attempt"):
            await client.call(_request(), VisualEvidence)
        assert len(transport.requests) == 2

    @pytest.mark.anyio
    async def test_schema_violation_not_retried(self):
        transport = ScriptedTransport(["{}", json.dumps(EVIDENCE)])
        client = WireClient(transport, name="judge", retries=3)
        with pytest.raises(SchemaViolationError):
            await client.call(_request(), VisualEvidence)
        assert len(transport.requests) == 1

    @pytest.mark.anyio
    async def test_mismatched_request_id(self):
        transport = ScriptedTransport([json.dumps({**EVIDENCE, "request_id": "other"})])
        client = WireClient(transport, name="judge")
        with pytest.raises(SchemaViolationError) as exc:
            await client.call(_request("judge-assess-0"), VisualEvidence)
        assert exc.value.field == "request_id"

    @pytest.mark.anyio
    async def test_callable_script_item_sees_request(self):
        def echo(request):
            return json.dumps({**EVIDENCE, "request_id": request.request_id})

        client = WireClient(ScriptedTransport([echo]), name="judge")
        ev = await client.call(_request("judge-assess-7"), VisualEvidence)
        assert ev.request_id == "judge-assess-7"

    @pytest.mark.anyio
    async def test_empty_script_is_unavailable(self):
        client = WireClient(ScriptedTransport([]), name="gen", retries=0)
        with pytest.raises(ServiceUnavailableError, match="no responses left"):
            await client.call(_request(), VisualEvidence)


# ── Agent SDK transport ──────────────────────────────────────────────────────


class TestAgentTransport:
    @pytest.mark.anyio
    async def test_sends_document_with_system_prompt(self, tmp_path: Path):
        (tmp_path / "prompts").mkdir()
        (tmp_path / "prompts" / "judge.md").write_text("<role>judge</role>")
        captured = []

        async def mock_query(*, prompt, options):
            captured.append((prompt, options))
            yield _result(json.dumps(EVIDENCE))

        transport = AgentTransport("judge.md", endpoint="http://judge.local", model="m")
        with (
            patch.object(claude_agent_sdk, "query", mock_query),
            patch.dict(os.environ, {"EAVESDROP_DATA_DIR": str(tmp_path)}),
        ):
            text = await transport.exchange(_request())

        assert json.loads(text)["pose"] == "frontal"
        prompt, options = captured[0]
        assert json.loads(prompt)["request_id"] == "judge-assess-0"
        assert options.system_prompt == "<role>judge</role>"
        assert options.allowed_tools == []
        assert options.max_turns == 1
        assert options.env == {"ANTHROPIC_BASE_URL": "http://judge.local"}

    @pytest.mark.anyio
    async def test_error_result_becomes_transport_error(self):
        async def mock_query(*, prompt, options):  # noqa: ARG001
            yield _result("overloaded", is_error=True)

        with patch.object(claude_agent_sdk, "query", mock_query):
            with pytest.raises(TransportError, match="overloaded"):
                await AgentTransport("judge.md").exchange(_request())

    @pytest.mark.anyio
    async def test_sdk_exception_becomes_transport_error(self):
        async def mock_query(*, prompt, options):  # noqa: ARG001
            raise RuntimeError("connection refused")
            yield  # pragma: no cover

        with patch.object(claude_agent_sdk, "query", mock_query):
            with pytest.raises(TransportError, match="connection refused"):
                await AgentTransport("judge.md").exchange(_request())

    @pytest.mark.anyio
    async def test_timeout_closes_stream(self):
        closed = []

        async def mock_query(*, prompt, options):  # noqa: ARG001
            try:
                yield _result("partial")
                await anyio.sleep(10)
            finally:
                closed.append(True)

        transport = AgentTransport("judge.md", timeout=0.05)
        with patch.object(claude_agent_sdk, "query", mock_query):
            with pytest.raises(TransportError, match="No answer"):
                await transport.exchange(_request())
        assert closed == [True]

    @pytest.mark.anyio
    async def test_no_result_message(self):
        async def mock_query(*, prompt, options):  # noqa: ARG001
            return
            yield  # pragma: no cover

        with patch.object(claude_agent_sdk, "query", mock_query):
            with pytest.raises(TransportError, match="No result"):
                await AgentTransport("judge.md").exchange(_request())
