"""Tests for the perception agent: IQA metrics, judge evidence and fusion."""

from __future__ import annotations

import json

import numpy as np
import pytest

from eavesdrop.errors import InvalidArgumentError, JudgeUnavailableError, TransportError
from eavesdrop.image import draw_face_params, noise_image, render_face, synth_face
from eavesdrop.numerics import Rng
from eavesdrop.perception import (
    FusionWeights,
    HeuristicJudge,
    IqaCalibration,
    IqaVector,
    PerceptionAgent,
    WireJudge,
    calibrate,
    evidence_score,
    fuse,
    iqa_score,
    judge_assess,
)
from eavesdrop.session import CandidatePool
from eavesdrop.wire import SCHEMA_VERSION, ScriptedTransport, VisualEvidence, WireClient

SIDE = 16


def _evidence(**overrides) -> VisualEvidence:
    fields = {
        "schema_version": SCHEMA_VERSION,
        "face_visible": True,
        "pose": "frontal",
        "components_complete": 1.0,
        "artifacts_present": False,
        "artifact_severity": 0.0,
        "artifact_descriptions": [],
        "confidence": 1.0,
    }
    fields.update(overrides)
    return VisualEvidence(**fields)


@pytest.fixture(scope="module")
def calibration() -> IqaCalibration:
    return calibrate(Rng(0).child("cal"), SIDE, SIDE, n_clean=20, n_noise=20)


@pytest.fixture(scope="module")
def judge(calibration) -> HeuristicJudge:
    return HeuristicJudge(SIDE, SIDE, cal=calibration)


def _faces(n: int = 5) -> list[np.ndarray]:
    return [synth_face(Rng(100).child("face", i), SIDE, SIDE) for i in range(n)]


def _noises(n: int = 5) -> list[np.ndarray]:
    return [noise_image(Rng(100).child("noise", i), SIDE, SIDE) for i in range(n)]


# ── IQA ──────────────────────────────────────────────────────────────────────


class TestIqa:
    def test_vector_in_unit_range(self, calibration):
        for x in _faces(3) + _noises(3):
            q = iqa_score(x, calibration)
            assert q.names == ("sharpness", "saturation", "tv_naturalness")
            assert all(0.0 <= v <= 1.0 for v in q.values)

    def test_faces_score_above_noise(self, calibration):
        face_mean = np.mean([iqa_score(x, calibration).mean for x in _faces()])
        noise_mean = np.mean([iqa_score(x, calibration).mean for x in _noises()])
        assert face_mean > noise_mean

    def test_noise_is_unnatural(self, calibration):
        q = iqa_score(_noises(1)[0], calibration).as_dict()
        assert q["tv_naturalness"] < 0.5
        assert q["saturation"] < 1.0

    def test_calibration_ordering(self, calibration):
        assert calibration.sharpness_hi > calibration.sharpness_lo
        assert 0.0 <= calibration.tv_lo <= calibration.tv_hi
        assert calibration.tv_falloff > 0.0

    def test_invalid_calibration(self):
        with pytest.raises(InvalidArgumentError, match="sharpness"):
            IqaCalibration(sharpness_lo=1.0, sharpness_hi=0.0)
        with pytest.raises(InvalidArgumentError, match="TV band"):
            IqaCalibration(tv_lo=0.5, tv_hi=0.1)

    def test_vector_rejects_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            IqaVector(("a",), (1.2,))
        with pytest.raises(InvalidArgumentError):
            IqaVector((), ())

    def test_custom_metric_set(self):
        q = iqa_score(np.full((3, SIDE, SIDE), 0.5), metrics=[("flat", lambda x, cal: 0.25)])
        assert q.as_dict() == {"flat": 0.25}


# ── Evidence and fusion ──────────────────────────────────────────────────────


class TestFusion:
    def test_evidence_score_formula(self):
        ev = _evidence(
            confidence=0.8, components_complete=0.5, artifacts_present=True, artifact_severity=0.4
        )
        assert evidence_score(ev) == pytest.approx(0.8 * 0.5 * (1.0 - 0.2))

    def test_artifact_severity_ignored_without_artifacts(self):
        assert evidence_score(_evidence(artifact_severity=1.0)) == 1.0

    def test_invisible_face_scores_zero(self):
        assert evidence_score(_evidence(face_visible=False, pose="none")) == 0.0

    def test_fuse_weights(self):
        q = IqaVector(("a", "b"), (0.2, 0.6))
        fb = fuse(q, 0.5, FusionWeights(0.4, 0.6, 0.35))
        assert fb.fused == pytest.approx(0.4 * 0.4 + 0.6 * 0.5)
        assert fb.plausible
        assert not fb.unscored

    def test_invisible_face_never_plausible(self):
        fb = fuse(IqaVector(("a",), (1.0,)), 1.0, face_visible=False)
        assert not fb.plausible

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidArgumentError, match="sum to 1"):
            FusionWeights(0.5, 0.6)


# ── Heuristic judge ──────────────────────────────────────────────────────────


class TestHeuristicJudge:
    def test_faces_mostly_visible(self, judge):
        visible = [judge.evidence(x).face_visible for x in _faces()]
        assert sum(visible) >= 4

    def test_noise_not_visible(self, judge):
        for x in _noises(3):
            ev = judge.evidence(x)
            assert not ev.face_visible
            assert ev.pose == "none"
            assert ev.artifacts_present
            assert evidence_score(ev) == 0.0

    def test_constant_image(self, judge):
        ev = judge.evidence(np.full((3, SIDE, SIDE), 0.5))
        assert not ev.face_visible
        assert judge.correlation(np.full((3, SIDE, SIDE), 0.5)) == 0.0

    def test_background_tone_in_auxiliary(self, judge):
        assert judge.evidence(np.full((3, SIDE, SIDE), 0.9)).auxiliary["background"] == "light"
        assert judge.evidence(np.full((3, SIDE, SIDE), 0.1)).auxiliary["background"] == "dark"

    def test_background_matches_generator(self, judge):
        hits = 0
        for i in range(50):
            params = draw_face_params(Rng(300).child("bg", i), SIDE, SIDE)
            ev = judge.evidence(render_face(params, SIDE, SIDE))
            hits += ev.auxiliary["background"] == params.background_tone
        assert hits >= 45

    def test_attributes_are_valid_captions(self, judge):
        desc = judge.attributes(_faces(1)[0])
        for name in desc.ATTRIBUTES:
            assert 0 < len(getattr(desc, name)) <= 300

    def test_template_is_deterministic(self, calibration):
        a = HeuristicJudge(SIDE, SIDE, cal=calibration).template
        b = HeuristicJudge(SIDE, SIDE, cal=calibration).template
        assert np.array_equal(a, b)

    @pytest.mark.anyio
    async def test_async_interface(self, judge):
        x = _faces(1)[0]
        assert await judge.assess(x) == judge.evidence(x)
        assert await judge.describe(x) == judge.attributes(x)


# ── Perception agent ─────────────────────────────────────────────────────────


class _RecordingJudge:
    def __init__(self):
        self.seen: list[np.ndarray] = []

    async def assess(self, x):
        self.seen.append(x)
        return _evidence()

    async def describe(self, x):  # pragma: no cover
        raise NotImplementedError


class TestPerceptionAgent:
    @pytest.mark.anyio
    async def test_judge_sees_clipped_image(self):
        judge = _RecordingJudge()
        await judge_assess(np.full((3, 4, 4), 1.7), judge)
        assert judge.seen[0].max() == 1.0

    @pytest.mark.anyio
    async def test_unavailable_judge_gives_unscored_feedback(self, calibration):
        client = WireClient(
            ScriptedTransport([TransportError("down")], cycle=True),
            name="judge",
            retries=1,
            unavailable_error=JudgeUnavailableError,
        )
        agent = PerceptionAgent(WireJudge(client), calibration=calibration)
        fb = await agent.feedback(_faces(1)[0])
        assert fb.unscored
        assert fb.evidence is None
        assert "unavailable" in fb.reason
        assert fb.fused == pytest.approx(agent.iqa(_faces(1)[0]).mean)

    @pytest.mark.anyio
    async def test_schema_violation_gives_unscored_feedback(self):
        client = WireClient(ScriptedTransport(['{"face_visible": "maybe"}']), name="judge")
        fb = await PerceptionAgent(WireJudge(client)).feedback(_faces(1)[0])
        assert fb.unscored

    @pytest.mark.anyio
    async def test_wire_judge_sends_assess_task(self):
        doc = _evidence().model_dump()
        transport = ScriptedTransport([json.dumps(doc)])
        fb = await PerceptionAgent(WireJudge(WireClient(transport, name="judge"))).feedback(
            _faces(1)[0]
        )
        assert not fb.unscored
        assert transport.requests[0].task == "assess"

    @pytest.mark.anyio
    async def test_score_pool_scores_each_candidate_once(self, judge, calibration):
        pool = CandidatePool()
        for i, x in enumerate(_faces(2) + _noises(1)):
            pool.append(x, 1.0, "s0", i)
        agent = PerceptionAgent(judge, calibration=calibration)
        scored = await agent.score_pool(pool)
        assert [c.id for c, _ in scored] == [0, 1, 2]
        assert pool.unscored() == []
        assert not pool.scores(2).plausible
        assert await agent.score_pool(pool) == []
