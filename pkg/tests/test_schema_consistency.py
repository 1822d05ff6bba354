"""Tests that the shipped wire schema and prompts agree with the parsers.

The pydantic models in ``eavesdrop.wire`` are what actually parses
responses; ``schemas/wire-v1.json`` is what endpoint authors read. A field
added to one and not the other shows up here.
"""

from __future__ import annotations

import json
import re
import string
from pathlib import Path

import pytest

from eavesdrop import wire
from eavesdrop.orchestrator import ActionKind

ROOT = Path(__file__).resolve().parent.parent
SCHEMA = json.loads((ROOT / "schemas" / "wire-v1.json").read_text())
DOCUMENTS = SCHEMA["documents"]


def _model(name: str) -> type:
    return getattr(wire, DOCUMENTS[name]["model"])


class TestWireSchema:
    def test_version_matches(self):
        assert SCHEMA["schema_version"] == wire.SCHEMA_VERSION

    @pytest.mark.parametrize("name", sorted(DOCUMENTS))
    def test_properties_match_model_fields(self, name: str):
        model = _model(name)
        assert set(DOCUMENTS[name]["properties"]) == set(model.model_fields)

    @pytest.mark.parametrize("name", sorted(DOCUMENTS))
    def test_required_matches_model(self, name: str):
        model = _model(name)
        required = {n for n, f in model.model_fields.items() if f.is_required()}
        assert set(DOCUMENTS[name]["required"]) == required

    def test_response_documents_cover_every_task(self):
        for task, model in wire.RESPONSE_MODELS.items():
            assert DOCUMENTS[task]["model"] == model.__name__

    def test_policy_actions_match_action_kinds(self):
        enum = DOCUMENTS["policy"]["properties"]["action"]["enum"]
        assert set(enum) == {str(k) for k in ActionKind}

    def test_description_fields_listed(self):
        props = set(DOCUMENTS["describe"]["properties"])
        assert set(wire.AttributeDescription.ATTRIBUTES) <= props


class TestPrompts:
    @pytest.mark.parametrize(
        "name", ["judge.md", "assess.md", "describe.md", "generate.md", "policy.md", "restore.md"]
    )
    def test_prompt_shipped(self, name: str):
        assert (ROOT / "prompts" / name).read_text().strip()

    def test_restore_placeholders(self):
        """The restoration template uses exactly the caption fields plus the directive."""
        text = (ROOT / "prompts" / "restore.md").read_text()
        names = {f for _, f, _, _ in string.Formatter().parse(text) if f}
        assert names == set(wire.AttributeDescription.ATTRIBUTES) | {"directive"}

    def test_policy_prompt_names_every_action(self):
        text = (ROOT / "prompts" / "policy.md").read_text()
        named = set(re.findall(r"^- `([a-z_]+)`", text.split("<actions>")[1], re.MULTILINE))
        assert named == {str(k) for k in ActionKind}
