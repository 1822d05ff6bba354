"""Refinement agent: describe, restore, then re-anchor against the interception.

A generated image is never trusted on its own. It must stay faithful to the
reference it restored, then it seeds a fresh session that runs a short
burst against the intercepted observations. Only if the data residual stays
close to the source candidate's (or to the noise level, whichever is larger)
and the perception agent still finds the result plausible does it enter the
pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np
import scipy.ndimage

from eavesdrop.errors import (
    GenerationUnavailableError,
    InvalidArgumentError,
    SchemaViolationError,
    ServiceUnavailableError,
)
from eavesdrop.image import Image, clip_unit, face_prior, synth_face
from eavesdrop.inversion import DEFAULT_BURST, UpdateMode, data_residual
from eavesdrop.numerics import CMatrix, Rng
from eavesdrop.paths import _read_prompt
from eavesdrop.perception import FusedFeedback, Judge, PerceptionAgent
from eavesdrop.session import Candidate, CandidatePool, SessionManager
from eavesdrop.wire import AttributeDescription, WireClient, decode_image

RESTORE_DIRECTIVE = "Do not add new details that are not visible in the reference image."
ACCEPT_RATIO = 1.1
RESIDUAL_GATE = 2.0
MIN_FIDELITY = 0.3
PRIOR_SHRINKAGE = 1e-2
MAX_PROMPT_CHARS = 4000

_FALLBACK_TEMPLATE = """\
Restore the reference face image. This is restoration, not imagination.

Identity cues: {identity_cues}
Appearance: {appearance}
Pose: {pose}
Lighting: {lighting}
Background: {background}
Known quality issues: {quality_issues}

{directive}
"""


@dataclass(frozen=True)
class RestorationPrompt:
    text: str


async def describe(x: Image, judge: Judge) -> AttributeDescription:
    return await judge.describe(clip_unit(x))


def compose_prompt(
    c: AttributeDescription, directive: str = RESTORE_DIRECTIVE
) -> RestorationPrompt:
    """Fill the restoration template with every attribute and the directive."""
    template = _read_prompt("restore.md") or _FALLBACK_TEMPLATE
    fields = {name: getattr(c, name) for name in AttributeDescription.ATTRIBUTES}
    text = template.format(directive=directive, **fields)
    if directive not in text:
        text = f"{text.rstrip()}\n\n{directive}\n"
    if len(text) > MAX_PROMPT_CHARS:
        raise InvalidArgumentError(
            f"Restoration prompt is {len(text)} characters, limit {MAX_PROMPT_CHARS}"
        )
    return RestorationPrompt(text)


# ── Generators ───────────────────────────────────────────────────────────────


class Generator(Protocol):
    """Reference-conditioned generator. Sees the image and the prompt only."""

    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image: ...


class IdentityGenerator:
    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image:  # noqa: ARG002
        return np.array(x, copy=True)


class DenoiseGenerator:
    """Gaussian blur followed by an unsharp mask."""

    def __init__(self, sigma: float = 1.0, amount: float = 0.5):
        self.sigma = sigma
        self.amount = amount

    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image:  # noqa: ARG002
        spatial = (0.0, self.sigma, self.sigma)
        blurred = scipy.ndimage.gaussian_filter(x, sigma=spatial, mode="nearest")
        detail = blurred - scipy.ndimage.gaussian_filter(blurred, sigma=spatial, mode="nearest")
        return clip_unit(blurred + self.amount * detail)


class FacePriorGenerator:
    """Pulls the reference toward the face distribution with a Gaussian face prior.

    Components the prior deems unlikely are shrunk by ``lambda / (lambda + shrinkage)``,
    so blotchy inversion noise fades while face structure already present stays.
    """

    def __init__(self, shrinkage: float = PRIOR_SHRINKAGE):
        if not shrinkage > 0:
            raise InvalidArgumentError(f"Shrinkage must be > 0, got {shrinkage}")
        self.shrinkage = shrinkage

    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image:  # noqa: ARG002
        prior = face_prior(x.shape[1], x.shape[2])
        return clip_unit(prior.shrink(clip_unit(x), self.shrinkage))


class AdversarialGenerator:
    """Ignores its input and returns an unrelated face."""

    def __init__(self, seed: int = 0xBAD):
        self.rng = Rng(seed).child("adversarial")
        self.calls = 0

    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image:  # noqa: ARG002
        self.calls += 1
        return synth_face(self.rng.child(self.calls), x.shape[1], x.shape[2])


class WireGenerator:
    def __init__(self, client: WireClient):
        self.client = client

    async def generate(self, x: Image, prompt: RestorationPrompt) -> Image:
        response = await self.client.image_task("generate", clip_unit(x), prompt.text)
        image = decode_image(response.image)
        if image.shape != x.shape:
            raise SchemaViolationError(
                f"Generated image is {image.shape}, reference is {x.shape}", "image"
            )
        return image


async def generate(x: Image, prompt: RestorationPrompt, generator: Generator) -> Image:
    """Run the generator; any protocol failure becomes GenerationUnavailableError."""
    try:
        return await generator.generate(x, prompt)
    except GenerationUnavailableError:
        raise
    except (SchemaViolationError, ServiceUnavailableError) as exc:
        raise GenerationUnavailableError(f"Generation failed: {exc.message}") from exc


# ── Re-anchoring ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RefinementOutcome:
    source_id: int
    decision: Literal["accepted", "rejected", "skipped"]
    reason: str
    generated: Image | None = None
    residual_before: float | None = None
    residual_after: float | None = None
    session_id: str | None = None
    candidate: Candidate | None = None
    feedback: FusedFeedback | None = None

    @property
    def accepted(self) -> bool:
        return self.decision == "accepted"


def reference_fidelity(x_g: Image, reference: Image) -> float:
    """Pearson correlation of the generated image with the reference it restored.

    Two flat images count as faithful only when they are equal.
    """
    a = np.asarray(x_g, dtype=np.float64).ravel()
    b = np.asarray(reference, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Generated image has {a.size} values, reference {b.size}")
    a = a - a.mean()
    b = b - b.mean()
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom <= 1e-12:
        return 1.0 if np.allclose(x_g, reference) else 0.0
    return float(np.dot(a, b) / denom)


async def reanchor(
    x_g: Image,
    best_g: CMatrix,
    source: Candidate,
    manager: SessionManager,
    perception: PerceptionAgent,
    *,
    budget: int = DEFAULT_BURST,
    accept_ratio: float = ACCEPT_RATIO,
    mode: UpdateMode = UpdateMode.JOINT,
    acquisition_steps: int = 0,
    lr_x: float | None = None,
    noise_floor: float = 0.0,
    min_fidelity: float = MIN_FIDELITY,
) -> RefinementOutcome:
    """Warm-start a session at ``x_g`` and keep the result only if it stays consistent.

    A generated image whose fidelity to the source image is below
    ``min_fidelity`` is rejected before any optimizer step. Otherwise a
    fresh session (new Adam moments, image step ``lr_x``) first fits the
    channel alone for ``acquisition_steps`` and then runs ``budget`` steps
    in ``mode``. Accept iff the post-burst data residual is at most
    ``accept_ratio`` times max(source residual, ``noise_floor``) AND the
    post-burst snapshot is plausible. A rejected session is discarded and
    leaves the pool untouched.
    """
    if budget < 1:
        raise InvalidArgumentError(f"Re-anchoring budget must be >= 1, got {budget}")
    if acquisition_steps < 0:
        raise InvalidArgumentError(f"Acquisition steps must be >= 0, got {acquisition_steps}")
    before = source.data_residual
    fidelity = reference_fidelity(x_g, source.image)
    if fidelity < min_fidelity:
        reason = f"generated image drifted from its reference (fidelity {fidelity:.3f})"
        return RefinementOutcome(source.id, "rejected", reason, x_g, before)

    session = manager.start(
        x_g, best_g, parent_id=source.session_id, origin="reanchor", lr_x=lr_x
    )
    for phase, n_steps in ((UpdateMode.CHANNEL_ONLY, acquisition_steps), (mode, budget)):
        if n_steps == 0:
            continue
        burst = manager.advance(session.id, phase, n_steps, emit=False).burst
        if burst.aborted:
            reason = f"non-finite values during re-anchoring: {burst.reason}"
            manager.discard(session.id, reason)
            return RefinementOutcome(
                source.id, "rejected", reason, x_g, before, None, session.id
            )

    snapshot = clip_unit(session.state.x)
    after = data_residual(snapshot, session.state.g, manager.r, manager.enc)
    feedback = await perception.feedback(snapshot)
    bound = accept_ratio * max(before, noise_floor)
    consistent = after <= bound
    if not (consistent and feedback.plausible):
        reason = (
            f"residual {after:.4g} exceeds bound {bound:.4g}"
            if not consistent
            else f"implausible after re-anchoring (fused {feedback.fused:.3f})"
        )
        manager.discard(session.id, reason)
        return RefinementOutcome(
            source.id, "rejected", reason, x_g, before, after, session.id, feedback=feedback
        )

    cp = manager.snapshot(session.id)
    cand = manager.pool.append(
        snapshot,
        after,
        session.id,
        cp.step,
        origin="refined",
        checkpoint_id=cp.id,
        source_id=source.id,
        residual_before=before,
        residual_after=after,
    )
    manager.pool.attach_scores(cand.id, feedback)
    return RefinementOutcome(
        source.id, "accepted", "consistent and plausible", x_g, before, after, session.id,
        cand, feedback,
    )  # fmt: skip


# ── Candidate selection ──────────────────────────────────────────────────────


def residual_limit(pool: CandidatePool, gate: float, noise_floor: float = 0.0) -> float:
    """``gate`` x max(pool minimum residual, ``noise_floor``)."""
    return gate * max(pool.min_residual(), noise_floor)


def select_candidate(
    pool: CandidatePool,
    *,
    gate: float = RESIDUAL_GATE,
    refinable_only: bool = False,
    exclude: set[int] | frozenset[int] = frozenset(),
    noise_floor: float = 0.0,
) -> Candidate | None:
    """Highest fused score among candidates whose residual is within the gate.

    The gate is ``gate`` x the pool minimum, or x ``noise_floor`` when the
    whole pool fits below the noise. Ties break on lower residual, then
    earlier insertion. With ``refinable_only`` refined candidates and
    ``exclude`` are skipped.
    """
    if not len(pool):
        return None
    limit = residual_limit(pool, gate, noise_floor)
    best: tuple[float, float, int] | None = None
    chosen = None
    for cand in pool.entries():
        if cand.data_residual > limit:
            continue
        if refinable_only and (cand.origin == "refined" or cand.id in exclude):
            continue
        fb = pool.scores(cand.id)
        key = (-(fb.fused if fb else 0.0), cand.data_residual, cand.id)
        if best is None or key < best:
            best, chosen = key, cand
    return chosen


def select_final(
    pool: CandidatePool, *, gate: float = RESIDUAL_GATE, noise_floor: float = 0.0
) -> Candidate | None:
    """The latest accepted refinement within the gate, else :func:`select_candidate`.

    Each accepted refinement starts from the best candidate known at the
    time, so the most recent one carries every earlier restoration.
    """
    if not len(pool):
        return None
    limit = residual_limit(pool, gate, noise_floor)
    refined = [c for c in pool.entries() if c.origin == "refined" and c.data_residual <= limit]
    if refined:
        return refined[-1]
    return select_candidate(pool, gate=gate, noise_floor=noise_floor)


class RefinementAgent:
    """describe -> compose -> generate -> re-anchor for one candidate."""

    def __init__(
        self,
        judge: Judge,
        generator: Generator,
        perception: PerceptionAgent,
        *,
        budget: int = DEFAULT_BURST,
        accept_ratio: float = ACCEPT_RATIO,
        directive: str = RESTORE_DIRECTIVE,
        lr_x: float | None = None,
        min_fidelity: float = MIN_FIDELITY,
    ):
        self.judge = judge
        self.generator = generator
        self.perception = perception
        self.budget = budget
        self.accept_ratio = accept_ratio
        self.directive = directive
        self.lr_x = lr_x
        self.min_fidelity = min_fidelity

    async def prepare(self, source: Candidate) -> tuple[Image | None, str]:
        """Generated image for ``source``, or None with the reason it was skipped."""
        try:
            description = await describe(source.image, self.judge)
        except (SchemaViolationError, ServiceUnavailableError) as exc:
            return None, f"description unavailable: {exc.message}"
        prompt = compose_prompt(description, self.directive)
        try:
            return await generate(source.image, prompt, self.generator), ""
        except GenerationUnavailableError as exc:
            return None, exc.message

    async def refine(
        self,
        source: Candidate,
        best_g: CMatrix,
        manager: SessionManager,
        *,
        mode: UpdateMode = UpdateMode.JOINT,
        acquisition_steps: int = 0,
        noise_floor: float = 0.0,
    ) -> RefinementOutcome:
        x_g, reason = await self.prepare(source)
        if x_g is None:
            return RefinementOutcome(source.id, "skipped", reason)
        return await reanchor(
            x_g,
            best_g,
            source,
            manager,
            self.perception,
            budget=self.budget,
            accept_ratio=self.accept_ratio,
            mode=mode,
            acquisition_steps=acquisition_steps,
            lr_x=self.lr_x,
            noise_floor=noise_floor,
            min_fidelity=self.min_fidelity,
        )
