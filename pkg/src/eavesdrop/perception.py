"""Perception agent: no-reference quality metrics, judge evidence and fusion.

Nothing here may look at the source image. Candidates are scored from
their own pixels (IQA vector) and from the structured verdict of a judge,
and the two are fused into one feedback value that drives the policy.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol

import anyio
import numpy as np
import scipy.ndimage

from eavesdrop.errors import InvalidArgumentError, SchemaViolationError, ServiceUnavailableError
from eavesdrop.image import (
    Image,
    clip_unit,
    grayscale,
    noise_image,
    synth_face,
    total_variation,
)
from eavesdrop.numerics import Rng
from eavesdrop.paths import _read_prompt
from eavesdrop.session import Candidate, CandidatePool
from eavesdrop.wire import SCHEMA_VERSION, AttributeDescription, VisualEvidence, WireClient

# ── IQA metrics ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class IqaCalibration:
    """Normalization bounds of the built-in metrics.

    Sharpness maps log10 Laplacian variance linearly from
    [sharpness_lo, sharpness_hi] onto [0, 1]. TV-naturalness is 1 inside
    [tv_lo, tv_hi] (TV per element) and falls off linearly to 0 over
    ``tv_falloff`` outside it.
    """

    sharpness_lo: float = -4.0
    sharpness_hi: float = 0.0
    tv_lo: float = 0.02
    tv_hi: float = 0.30
    tv_falloff: float = 0.25

    def __post_init__(self) -> None:
        if not self.sharpness_hi > self.sharpness_lo:
            raise InvalidArgumentError("sharpness_hi must exceed sharpness_lo")
        if not (0 <= self.tv_lo <= self.tv_hi) or not self.tv_falloff > 0:
            raise InvalidArgumentError("TV band must satisfy 0 <= lo <= hi with falloff > 0")


def _clamp(v: float) -> float:
    return float(min(1.0, max(0.0, v)))


def sharpness_raw(x: Image) -> float:
    response = scipy.ndimage.laplace(grayscale(clip_unit(x)), mode="nearest")
    return float(np.log10(np.var(response) + 1e-12))


def sharpness(x: Image, cal: IqaCalibration) -> float:
    return _clamp((sharpness_raw(x) - cal.sharpness_lo) / (cal.sharpness_hi - cal.sharpness_lo))


def saturation(x: Image, cal: IqaCalibration) -> float:  # noqa: ARG001
    """1 - fraction of values sitting exactly at 0 or 1 after clipping."""
    c = clip_unit(x)
    return _clamp(1.0 - float(np.mean((c == 0.0) | (c == 1.0))))


def tv_per_element(x: Image) -> float:
    c = clip_unit(x)
    return total_variation(c) / c.size


def tv_naturalness(x: Image, cal: IqaCalibration) -> float:
    tv = tv_per_element(x)
    if cal.tv_lo <= tv <= cal.tv_hi:
        return 1.0
    distance = cal.tv_lo - tv if tv < cal.tv_lo else tv - cal.tv_hi
    return _clamp(1.0 - distance / cal.tv_falloff)


IqaMetric = Callable[[Image, IqaCalibration], float]

DEFAULT_METRICS: tuple[tuple[str, IqaMetric], ...] = (
    ("sharpness", sharpness),
    ("saturation", saturation),
    ("tv_naturalness", tv_naturalness),
)


@dataclass(frozen=True)
class IqaVector:
    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise InvalidArgumentError("IQA vector needs at least one metric")
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in self.values):
            raise InvalidArgumentError(f"IQA scores must lie in [0, 1], got {self.values}")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))


def iqa_score(
    x: Image,
    cal: IqaCalibration | None = None,
    metrics: Sequence[tuple[str, IqaMetric]] = DEFAULT_METRICS,
) -> IqaVector:
    cal = cal or IqaCalibration()
    return IqaVector(
        tuple(name for name, _ in metrics), tuple(_clamp(fn(x, cal)) for _, fn in metrics)
    )


def calibrate(
    rng: Rng, height: int, width: int, n_clean: int = 200, n_noise: int = 200
) -> IqaCalibration:
    """Derive metric bounds from seeded clean faces and noise images."""
    faces = [synth_face(rng.child("face", i), height, width) for i in range(n_clean)]
    noises = [noise_image(rng.child("noise", i), height, width) for i in range(n_noise)]
    face_sharp = np.array([sharpness_raw(f) for f in faces])
    face_tv = np.array([tv_per_element(f) for f in faces])
    noise_tv = np.array([tv_per_element(n) for n in noises])
    tv_lo = float(np.percentile(face_tv, 1)) * 0.5
    tv_hi = float(np.percentile(face_tv, 99)) * 1.5
    # Median noise image lands at zero TV-naturalness.
    falloff = max(float(np.median(noise_tv)) - tv_hi, 1e-3)
    return IqaCalibration(
        sharpness_lo=float(face_sharp.min()) - 1.0,
        sharpness_hi=float(face_sharp.max()),
        tv_lo=tv_lo,
        tv_hi=tv_hi,
        tv_falloff=falloff,
    )


# ── Evidence and fusion ──────────────────────────────────────────────────────


def evidence_score(v: VisualEvidence) -> float:
    """confidence · [face visible] · completeness · (1 - 0.5·severity·[artifacts])."""
    if not v.face_visible:
        return 0.0
    artifact_penalty = 0.5 * v.artifact_severity if v.artifacts_present else 0.0
    return _clamp(v.confidence * v.components_complete * (1.0 - artifact_penalty))


@dataclass(frozen=True)
class FusionWeights:
    w_q: float = 0.4
    w_e: float = 0.6
    tau_plausible: float = 0.35

    def __post_init__(self) -> None:
        if self.w_q < 0 or self.w_e < 0 or abs(self.w_q + self.w_e - 1.0) > 1e-9:
            raise InvalidArgumentError(
                f"Fusion weights must be non-negative and sum to 1, got {self.w_q}, {self.w_e}"
            )


@dataclass(frozen=True)
class FusedFeedback:
    iqa_mean: float
    evidence: float | None
    fused: float
    plausible: bool
    unscored: bool = False
    reason: str = ""


def fuse(
    q: IqaVector,
    e: float,
    weights: FusionWeights | None = None,
    *,
    face_visible: bool = True,
) -> FusedFeedback:
    weights = weights or FusionWeights()
    fused = _clamp(weights.w_q * q.mean + weights.w_e * e)
    return FusedFeedback(
        iqa_mean=q.mean,
        evidence=e,
        fused=fused,
        plausible=fused >= weights.tau_plausible and face_visible,
    )


def fuse_unscored(q: IqaVector, weights: FusionWeights | None, reason: str) -> FusedFeedback:
    """IQA-only feedback for a candidate the judge could not score.

    The evidence weight moves onto the IQA mean. Without a verdict on face
    visibility, plausibility rests on the threshold alone.
    """
    weights = weights or FusionWeights()
    fused = q.mean
    return FusedFeedback(
        iqa_mean=q.mean,
        evidence=None,
        fused=fused,
        plausible=fused >= weights.tau_plausible,
        unscored=True,
        reason=reason,
    )


# ── Judges ───────────────────────────────────────────────────────────────────


class Judge(Protocol):
    async def assess(self, x: Image) -> VisualEvidence: ...

    async def describe(self, x: Image) -> AttributeDescription: ...


class WireJudge:
    """Judge behind the wire protocol (a real LLM or a scripted transport)."""

    def __init__(self, client: WireClient):
        self.client = client

    async def assess(self, x: Image) -> VisualEvidence:
        return await self.client.image_task("assess", x, _read_prompt("assess.md"))

    async def describe(self, x: Image) -> AttributeDescription:
        return await self.client.image_task("describe", x, _read_prompt("describe.md"))


async def judge_assess(x: Image, judge: Judge) -> VisualEvidence:
    return await judge.assess(clip_unit(x))


_TEMPLATE_FACES = 64
_VISIBLE_CORR = 0.1
_VISIBLE_MAX_TV = 0.4


def _edge_map(x: Image) -> np.ndarray:
    gray = scipy.ndimage.gaussian_filter(grayscale(clip_unit(x)), sigma=1.0)
    return np.hypot(scipy.ndimage.sobel(gray, axis=0), scipy.ndimage.sobel(gray, axis=1))


def _background_tone(x: Image) -> str:
    c = clip_unit(x)
    corners = np.concatenate(
        [
            c[:, :2, :2].reshape(3, -1),
            c[:, :2, -2:].reshape(3, -1),
            c[:, -2:, :2].reshape(3, -1),
            c[:, -2:, -2:].reshape(3, -1),
        ],
        axis=1,
    ).mean(axis=1)
    return "light" if float(np.dot([0.299, 0.587, 0.114], corners)) > 0.5 else "dark"


class HeuristicJudge:
    """Offline judge built from image statistics.

    A face is "visible" when the blurred edge map correlates with the mean
    edge map of generated faces and the image is not dominated by
    pixel-level noise.
    """

    def __init__(
        self, height: int, width: int, seed: int = 0x7E4D, cal: IqaCalibration | None = None
    ):
        self.height = height
        self.width = width
        self.seed = seed
        self.cal = cal or IqaCalibration()

    @cached_property
    def template(self) -> np.ndarray:
        rng = Rng(self.seed).child("judge-template")
        edges = [
            _edge_map(synth_face(rng.child(i), self.height, self.width))
            for i in range(_TEMPLATE_FACES)
        ]
        return np.mean(edges, axis=0)

    def correlation(self, x: Image) -> float:
        a = _edge_map(x).ravel()
        b = self.template.ravel()
        a = a - a.mean()
        b = b - b.mean()
        denom = float(np.linalg.norm(a) * np.linalg.norm(b))
        return float(np.dot(a, b) / denom) if denom > 1e-12 else 0.0

    def evidence(self, x: Image) -> VisualEvidence:
        corr = self.correlation(x)
        tv = tv_per_element(x)
        visible = corr >= _VISIBLE_CORR and tv <= _VISIBLE_MAX_TV
        artifacts = tv > self.cal.tv_hi
        severity = _clamp((tv - self.cal.tv_hi) / self.cal.tv_falloff) if artifacts else 0.0
        return VisualEvidence(
            schema_version=SCHEMA_VERSION,
            face_visible=visible,
            pose="frontal" if visible else "none",
            components_complete=_clamp(corr / 0.5) if visible else 0.0,
            artifacts_present=artifacts,
            artifact_severity=severity,
            artifact_descriptions=["high-frequency noise"] if artifacts else [],
            confidence=_clamp(0.5 + corr),
            auxiliary={"background": _background_tone(x)},
        )

    def attributes(self, x: Image) -> AttributeDescription:
        ev = self.evidence(x)
        tone = _background_tone(x)
        brightness = float(np.mean(grayscale(clip_unit(x))))
        cues = "oval face with two dark eyes and a mouth" if ev.face_visible else "unknown"
        return AttributeDescription(
            schema_version=SCHEMA_VERSION,
            identity_cues=cues,
            appearance=f"mean brightness {brightness:.2f}",
            pose=ev.pose,
            lighting="even frontal lighting",
            background=f"{tone} plain background",
            quality_issues=", ".join(ev.artifact_descriptions) or "none",
        )

    async def assess(self, x: Image) -> VisualEvidence:
        return self.evidence(x)

    async def describe(self, x: Image) -> AttributeDescription:
        return self.attributes(x)


# ── Perception agent ─────────────────────────────────────────────────────────


class PerceptionAgent:
    """Scores pool candidates and attaches feedback exactly once per candidate."""

    def __init__(
        self,
        judge: Judge,
        *,
        calibration: IqaCalibration | None = None,
        weights: FusionWeights | None = None,
        metrics: Sequence[tuple[str, IqaMetric]] = DEFAULT_METRICS,
    ):
        self.judge = judge
        self.calibration = calibration or IqaCalibration()
        self.weights = weights or FusionWeights()
        self.metrics = tuple(metrics)

    def iqa(self, x: Image) -> IqaVector:
        return iqa_score(x, self.calibration, self.metrics)

    async def feedback(self, x: Image) -> FusedFeedback:
        q = self.iqa(x)
        try:
            ev = await judge_assess(x, self.judge)
        except (SchemaViolationError, ServiceUnavailableError) as exc:
            return fuse_unscored(q, self.weights, exc.message)
        return fuse(q, evidence_score(ev), self.weights, face_visible=ev.face_visible)

    async def score_pool(self, pool: CandidatePool) -> list[tuple[Candidate, FusedFeedback]]:
        """Score every unscored candidate concurrently; attach in pool order."""
        pending = pool.unscored()
        results: list[FusedFeedback | None] = [None] * len(pending)

        async def _one(i: int, cand: Candidate) -> None:
            results[i] = await self.feedback(cand.image)

        async with anyio.create_task_group() as tg:
            for i, cand in enumerate(pending):
                tg.start_soon(_one, i, cand)

        scored = []
        for cand, fb in zip(pending, results):
            pool.attach_scores(cand.id, fb)
            scored.append((cand, fb))
        return scored
