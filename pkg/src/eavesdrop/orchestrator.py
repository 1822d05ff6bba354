"""Closed-loop attack controller.

Each iteration runs a burst on the current session, lets the perception
agent score the new candidates, summarizes the state, asks the policy for
an action and executes it after checking that it is legal. Every decision
lands in the audit log together with the summary that justified it.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import click

from eavesdrop.channel import Interception
from eavesdrop.errors import (
    BranchBudgetExhausted,
    SchemaViolationError,
    ServiceUnavailableError,
    SessionError,
)
from eavesdrop.image import Image
from eavesdrop.inversion import DEFAULT_BURST, UpdateMode
from eavesdrop.numerics import CMatrix, Rng
from eavesdrop.perception import PerceptionAgent
from eavesdrop.refinement import (
    RESIDUAL_GATE,
    RefinementAgent,
    select_candidate,
    select_final,
)
from eavesdrop.semcom import EncoderHandle
from eavesdrop.session import (
    Candidate,
    CandidatePool,
    Session,
    SessionManager,
    StagnationConfig,
)
from eavesdrop.wire import PolicyResponse, StateSummary, WireClient

MIN_BURST = 20
MAX_BURST = 80
MAX_SWITCHES = 2

MODE_CYCLE = (UpdateMode.JOINT, UpdateMode.IMAGE_ONLY, UpdateMode.CHANNEL_ONLY)


# ── Actions ──────────────────────────────────────────────────────────────────


class ActionKind(enum.StrEnum):
    CONTINUE = "continue"
    SWITCH = "switch"
    ROLLBACK = "rollback"
    TERMINATE_AND_BRANCH = "terminate_and_branch"
    REFINE = "refine"
    FINALIZE = "finalize"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    mode: UpdateMode | None = None
    n_steps: int | None = None
    checkpoint_id: str | None = None
    candidate_id: int | None = None

    def to_dict(self) -> dict[str, Any]:
        params: dict[str, Any] = {}
        if self.mode is not None:
            params["mode"] = str(self.mode)
        if self.n_steps is not None:
            params["n_steps"] = self.n_steps
        if self.checkpoint_id is not None:
            params["checkpoint_id"] = self.checkpoint_id
        if self.candidate_id is not None:
            params["candidate_id"] = self.candidate_id
        return {"action": str(self.kind), "parameters": params}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> Action:
        """Build an action from ``{"action": ..., "parameters": {...}}``.

        Raises ValueError on unknown actions or missing/ill-typed parameters.
        """
        kind = ActionKind(doc["action"])
        params = dict(doc.get("parameters") or {})

        def _int(name: str) -> int:
            value = params.get(name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"parameter '{name}' must be an integer, got {value!r}")
            return value

        def _str(name: str) -> str:
            value = params.get(name)
            if not isinstance(value, str):
                raise ValueError(f"parameter '{name}' must be a string, got {value!r}")
            return value

        match kind:
            case ActionKind.CONTINUE:
                return Continue(UpdateMode(_str("mode")), _int("n_steps"))
            case ActionKind.SWITCH:
                return Switch(UpdateMode(_str("mode")))
            case ActionKind.ROLLBACK:
                return Rollback(_str("checkpoint_id"))
            case ActionKind.REFINE:
                return Refine(_int("candidate_id"))
            case ActionKind.TERMINATE_AND_BRANCH:
                return TerminateAndBranch()
            case _:
                return Finalize()


def Continue(mode: UpdateMode, n_steps: int = DEFAULT_BURST) -> Action:  # noqa: N802
    return Action(ActionKind.CONTINUE, mode=mode, n_steps=n_steps)


def Switch(mode: UpdateMode) -> Action:  # noqa: N802
    return Action(ActionKind.SWITCH, mode=mode)


def Rollback(checkpoint_id: str) -> Action:  # noqa: N802
    return Action(ActionKind.ROLLBACK, checkpoint_id=checkpoint_id)


def TerminateAndBranch() -> Action:  # noqa: N802
    return Action(ActionKind.TERMINATE_AND_BRANCH)


def Refine(candidate_id: int) -> Action:  # noqa: N802
    return Action(ActionKind.REFINE, candidate_id=candidate_id)


def Finalize() -> Action:  # noqa: N802
    return Action(ActionKind.FINALIZE)


def next_mode(mode: UpdateMode) -> UpdateMode:
    return MODE_CYCLE[(MODE_CYCLE.index(mode) + 1) % len(MODE_CYCLE)]


# ── Rule policy ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RuleThresholds:
    improvement: float = 0.01
    score_drop: float = 0.1
    burst: int = DEFAULT_BURST
    min_burst: int = MIN_BURST


@dataclass(frozen=True)
class _Facts:
    exhausted: bool
    degraded: bool
    improving: bool
    plausible: bool
    stagnant: bool
    can_switch: bool
    can_refine: bool
    can_branch: bool


def _facts(s: StateSummary, th: RuleThresholds) -> _Facts:
    return _Facts(
        exhausted=s.steps_left < th.min_burst,
        degraded=s.fused_drop > th.score_drop and s.best_checkpoint_id is not None,
        improving=s.improving,
        plausible=s.plausible,
        stagnant=s.stagnant,
        can_switch=not s.switches_exhausted,
        can_refine=s.refinements_left > 0 and s.best_candidate_id is not None,
        can_branch=s.branches_left > 0,
    )


def _open(f: _Facts) -> bool:
    """Neither exhausted, degraded, nor improving-and-plausible."""
    return not f.exhausted and not f.degraded and not (f.improving and f.plausible)


@dataclass(frozen=True)
class Rule:
    name: str
    when: Callable[[_Facts], bool]
    then: Callable[[StateSummary, RuleThresholds], Action]


# Predicates are mutually exclusive and jointly exhaustive; order is for reading only.
RULES: tuple[Rule, ...] = (
    Rule(
        "finalize_exhausted",
        lambda f: f.exhausted,
        lambda s, th: Finalize(),
    ),
    Rule(
        "rollback_degraded",
        lambda f: not f.exhausted and f.degraded,
        lambda s, th: Rollback(s.best_checkpoint_id),
    ),
    Rule(
        "continue_improving",
        lambda f: not f.exhausted and not f.degraded and f.improving and f.plausible,
        lambda s, th: Continue(UpdateMode(s.mode), th.burst),
    ),
    Rule(
        "switch_on_plateau",
        lambda f: _open(f) and f.stagnant and f.plausible and f.can_switch,
        lambda s, th: Switch(next_mode(UpdateMode(s.mode))),
    ),
    Rule(
        "refine_on_plateau",
        lambda f: _open(f) and f.stagnant and f.plausible and not f.can_switch and f.can_refine,
        lambda s, th: Refine(s.best_candidate_id),
    ),
    Rule(
        "branch_on_plateau",
        lambda f: _open(f)
        and f.stagnant
        and f.plausible
        and not f.can_switch
        and not f.can_refine
        and f.can_branch,
        lambda s, th: TerminateAndBranch(),
    ),
    Rule(
        "branch_implausible",
        lambda f: _open(f) and f.stagnant and not f.plausible and f.can_branch,
        lambda s, th: TerminateAndBranch(),
    ),
    Rule(
        "finalize_stuck",
        lambda f: _open(f)
        and f.stagnant
        and not f.can_branch
        and (not f.plausible or (not f.can_switch and not f.can_refine)),
        lambda s, th: Finalize(),
    ),
    Rule(
        "continue_searching",
        lambda f: _open(f) and not f.stagnant,
        lambda s, th: Continue(UpdateMode(s.mode), th.burst),
    ),
)


def matching_rules(s: StateSummary, th: RuleThresholds | None = None) -> list[Rule]:
    facts = _facts(s, th or RuleThresholds())
    return [rule for rule in RULES if rule.when(facts)]


def rule_policy(s: StateSummary, th: RuleThresholds | None = None) -> tuple[Action, str]:
    """Deterministic action for a summary, with the name of the rule that fired."""
    th = th or RuleThresholds()
    fired = matching_rules(s, th)
    if len(fired) != 1:
        raise SessionError(f"Rule table fired {len(fired)} rules: {[r.name for r in fired]}")
    return fired[0].then(s, th), fired[0].name


# ── Policies ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Decision:
    action: Action
    source: str
    rule: str = ""
    note: str = ""


class Policy(Protocol):
    async def decide(self, summary: StateSummary) -> Decision: ...


class RulePolicy:
    def __init__(self, thresholds: RuleThresholds | None = None):
        self.thresholds = thresholds or RuleThresholds()

    async def decide(self, summary: StateSummary) -> Decision:
        action, rule = rule_policy(summary, self.thresholds)
        return Decision(action, "rule", rule)


def validate_against_summary(action: Action, s: StateSummary) -> str:
    """Reason the action is illegal in ``s``, or empty string if it is legal."""
    match action.kind:
        case ActionKind.CONTINUE:
            if not MIN_BURST <= (action.n_steps or 0) <= MAX_BURST:
                return f"n_steps={action.n_steps} outside [{MIN_BURST}, {MAX_BURST}]"
        case ActionKind.ROLLBACK:
            if action.checkpoint_id not in s.checkpoint_ids:
                return f"unknown checkpoint '{action.checkpoint_id}'"
        case ActionKind.SWITCH:
            if action.mode == UpdateMode(s.mode):
                return f"already in mode {action.mode}"
        case ActionKind.REFINE:
            if s.refinements_left <= 0:
                return "refinement budget exhausted"
        case ActionKind.TERMINATE_AND_BRANCH:
            if s.branches_left <= 0:
                return "branch budget exhausted"
    return ""


class LlmPolicy:
    """Asks an LLM over the policy wire schema; falls back to the rule table.

    Transport failures, malformed documents and illegal actions all fall
    back, and the reason is kept in the decision note for the audit log.
    """

    def __init__(self, client: WireClient, fallback: RulePolicy | None = None):
        self.client = client
        self.fallback = fallback or RulePolicy()

    async def _fallback(self, summary: StateSummary, note: str) -> Decision:
        click.echo(f"[eavesdrop] policy fallback: {note}", err=True)
        decision = await self.fallback.decide(summary)
        return Decision(decision.action, "fallback", decision.rule, note)

    async def decide(self, summary: StateSummary) -> Decision:
        try:
            response: PolicyResponse = await self.client.policy(summary)
        except (ServiceUnavailableError, SchemaViolationError) as exc:
            return await self._fallback(summary, exc.message)
        try:
            action = Action.from_dict(response.model_dump())
        except (KeyError, ValueError) as exc:
            return await self._fallback(summary, f"malformed action: {exc}")
        reason = validate_against_summary(action, summary)
        if reason:
            return await self._fallback(summary, f"illegal action: {reason}")
        return Decision(action, "llm")


class ReplayPolicy:
    """Replays the policy decisions of a saved audit log, in order."""

    REPLAYED_SOURCES = frozenset({"rule", "llm", "fallback", "replay"})

    def __init__(self, audit: Sequence[dict[str, Any]]):
        self._actions = [
            Action.from_dict(rec["action"])
            for rec in audit
            if rec.get("event") == "decision" and rec.get("source") in self.REPLAYED_SOURCES
        ]
        self._next = 0

    async def decide(self, summary: StateSummary) -> Decision:  # noqa: ARG002
        if self._next >= len(self._actions):
            raise SessionError("Replay log has no decisions left")
        action = self._actions[self._next]
        self._next += 1
        return Decision(action, "replay")


# ── Attack context and result ────────────────────────────────────────────────


@dataclass(frozen=True)
class Budgets:
    max_steps: int = 4000
    max_branches: int = 5
    max_refinements: int = 3


@dataclass(frozen=True)
class AttackContext:
    """Everything the attacker is given.

    There is no field for a channel realization or for the
    source image; the wiretap link appears only through its statistics.
    Blind sessions open with ``acquisition_steps`` channel-only steps, and
    every rollback scales the session's image step by ``rollback_backoff``
    (never below ``min_lr_x``).
    """

    interception: Interception
    enc: EncoderHandle
    image_shape: tuple[int, int]
    budgets: Budgets = field(default_factory=Budgets)
    policy_id: str = "rule"
    burst: int = DEFAULT_BURST
    lambda_tv: float | None = None
    lr_x: float | None = None
    lr_g: float | None = None
    acquisition_steps: int = 0
    rollback_backoff: float = 1.0
    min_lr_x: float = 0.0
    stagnation: StagnationConfig = field(default_factory=StagnationConfig)
    thresholds: RuleThresholds = field(default_factory=RuleThresholds)
    warm_branch: bool = False
    residual_gate: float = RESIDUAL_GATE


@dataclass
class AttackResult:
    status: str
    image: Image | None
    candidate: Candidate | None
    pool: CandidatePool
    audit: list[dict[str, Any]]
    steps_used: int
    branches_used: int
    refinements_used: int
    reason: str = ""
    manager: SessionManager | None = None

    @property
    def failed(self) -> bool:
        return self.status != "ok"


# ── Loop ─────────────────────────────────────────────────────────────────────


class _Loop:
    """Mutable bookkeeping of one run_attack call."""

    def __init__(
        self,
        ctx: AttackContext,
        rng: Rng,
        perception: PerceptionAgent,
        refiner: RefinementAgent | None,
        policy: Policy,
        known_channel: CMatrix | None,
    ):
        self.ctx = ctx
        self.rng = rng
        self.perception = perception
        self.refiner = refiner
        self.policy = policy
        self.known_channel = known_channel
        self.manager = SessionManager(
            ctx.enc,
            ctx.interception.r,
            ctx.image_shape,
            stagnation=ctx.stagnation,
            max_branches=ctx.budgets.max_branches,
            entry_variance=ctx.interception.stats.entry_variance,
            lambda_tv=ctx.lambda_tv,
            lr_x=ctx.lr_x,
            lr_g=ctx.lr_g,
        )
        self.audit: list[dict[str, Any]] = []
        self.refinements_used = 0
        self.refine_attempted: set[int] = set()
        self.switches = 0
        self.session: Session | None = None
        self.mode = UpdateMode.IMAGE_ONLY if known_channel is not None else UpdateMode.JOINT
        self.last_aborted = ""

    # ── bookkeeping ──

    @property
    def steps_left(self) -> int:
        return max(0, self.ctx.budgets.max_steps - self.manager.steps_spent)

    def log(self, event: str, **fields: Any) -> None:
        self.audit.append({"index": len(self.audit), "event": event, **fields})

    @property
    def noise_floor(self) -> float:
        return self.ctx.interception.noise_energy

    @property
    def acquisition_steps(self) -> int:
        return 0 if self.known_channel is not None else self.ctx.acquisition_steps

    @property
    def refine_cost(self) -> int:
        return self.refiner.budget + self.acquisition_steps if self.refiner is not None else 0

    def allowed_modes(self) -> tuple[UpdateMode, ...]:
        if self.known_channel is not None:
            return (UpdateMode.IMAGE_ONLY,)
        return MODE_CYCLE

    def _open_session(self, kind: str, index: int, parent: str | None) -> Session:
        stream = self.rng.child(kind, index)
        warm = None
        if self.ctx.warm_branch and kind == "branch":
            best = select_candidate(
                self.manager.pool, gate=self.ctx.residual_gate, noise_floor=self.noise_floor
            )
            warm = best.image if best is not None else None
        if kind == "root":
            x0, g0 = self.manager.fresh_variables(stream)
            if self.known_channel is not None:
                g0 = self.known_channel
            session = self.manager.start(x0, g0)
        else:
            session = self._pin(self.manager.branch(stream, parent_id=parent, warm_image=warm))
        self.acquire(session)
        return session

    def _pin(self, session: Session) -> Session:
        # Channel-aware attacks keep G̃ at the known realization in every branch.
        if self.known_channel is not None:
            session.state = replace(session.state, g=self.known_channel.copy())
        return session

    def acquire(self, session: Session) -> None:
        """Fit the channel alone before the image moves; logged, never pooled.

        Acquisition leaves room for one burst of the session.
        """
        n_steps = min(self.acquisition_steps, self.steps_left - self.ctx.burst)
        if n_steps < 1:
            return
        outcome = self.manager.advance(session.id, UpdateMode.CHANNEL_ONLY, n_steps, emit=False)
        self.last_aborted = outcome.burst.reason if outcome.burst.aborted else ""
        self.log(
            "acquisition",
            session=session.id,
            steps=len(outcome.burst.trace),
            aborted=self.last_aborted,
        )

    # ── bursts and scoring ──

    def burst(self, mode: UpdateMode, n_steps: int) -> dict[str, Any]:
        n_eff = min(n_steps, self.steps_left)
        if n_eff < 1:
            return {"steps": 0, "skipped": "step budget exhausted"}
        outcome = self.manager.advance(self.session.id, mode, n_eff)
        self.mode = mode
        self.last_aborted = outcome.burst.reason if outcome.burst.aborted else ""
        result: dict[str, Any] = {
            "session": self.session.id,
            "mode": str(mode),
            "steps": len(outcome.burst.trace),
        }
        if outcome.burst.aborted:
            result["aborted"] = outcome.burst.reason
        if outcome.checkpoint is not None:
            result["checkpoint"] = outcome.checkpoint.id
            result["loss"] = outcome.checkpoint.loss
            result["candidate"] = outcome.candidate.id
            result["residual"] = outcome.candidate.data_residual
        return result

    async def score(self) -> None:
        for cand, fb in await self.perception.score_pool(self.manager.pool):
            self.log(
                "perception",
                candidate=cand.id,
                fused=fb.fused,
                iqa_mean=fb.iqa_mean,
                evidence=fb.evidence,
                plausible=fb.plausible,
                unscored=fb.unscored,
                reason=fb.reason,
            )

    # ── summary ──

    def summary(self) -> StateSummary:
        session = self.session
        pool = self.manager.pool
        live = {cp.id for cp in session.checkpoints}
        own = [c for c in pool.entries() if c.session_id == session.id and c.checkpoint_id in live]
        scored = [(c, pool.scores(c.id)) for c in own if pool.scores(c.id) is not None]
        if scored:
            latest_fb = scored[-1][1]
            best_cand, best_fb = max(scored, key=lambda cf: (cf[1].fused, -cf[0].id))
            fused, fused_best = latest_fb.fused, best_fb.fused
            plausible = latest_fb.plausible
            best_checkpoint = best_cand.checkpoint_id
        else:
            fused = fused_best = 0.0
            plausible = False
            best_checkpoint = None

        ends = session.burst_end_losses
        improvement = 0.0
        if len(ends) >= 2 and ends[-2] > 0:
            improvement = (ends[-2] - ends[-1]) / ends[-2]

        refine_ok = (
            self.refiner is not None
            and self.steps_left >= self.refine_cost
            and self.refinements_used < self.ctx.budgets.max_refinements
        )
        target = (
            select_candidate(
                pool,
                gate=self.ctx.residual_gate,
                refinable_only=True,
                exclude=self.refine_attempted,
                noise_floor=self.noise_floor,
            )
            if refine_ok
            else None
        )
        refinements_left = self.ctx.budgets.max_refinements - self.refinements_used
        return StateSummary(
            mode=str(self.mode),
            session_id=session.id,
            improvement=improvement,
            improving=improvement >= self.ctx.thresholds.improvement,
            fused=fused,
            fused_best=fused_best,
            fused_drop=fused_best - fused,
            plausible=plausible,
            stagnant=self.manager.session_is_stagnant(session.id),
            switches_exhausted=self.switches >= MAX_SWITCHES or len(self.allowed_modes()) == 1,
            steps_left=self.steps_left,
            branches_left=self.manager.branches_left,
            refinements_left=refinements_left if refine_ok else 0,
            best_checkpoint_id=best_checkpoint,
            best_candidate_id=target.id if target is not None else None,
            checkpoint_ids=[cp.id for cp in session.checkpoints],
        )

    # ── execution ──

    def check_legal(self, action: Action, s: StateSummary) -> str:
        reason = validate_against_summary(action, s)
        if reason:
            return reason
        match action.kind:
            case ActionKind.CONTINUE | ActionKind.SWITCH:
                if action.mode not in self.allowed_modes():
                    return f"mode {action.mode} not available"
            case ActionKind.REFINE:
                if self.refiner is None:
                    return "refinement disabled"
                if action.candidate_id is None or not 0 <= action.candidate_id < len(
                    self.manager.pool
                ):
                    return f"unknown candidate {action.candidate_id}"
                cand = self.manager.pool.get(action.candidate_id)
                if cand.origin == "refined" or cand.id in self.refine_attempted:
                    return f"candidate {cand.id} is not refinable"
                if self.steps_left < self.refine_cost:
                    return "not enough steps left to re-anchor"
        return ""

    async def execute(self, action: Action) -> tuple[dict[str, Any], bool]:
        """Apply ``action``; returns (result record, finished)."""
        default = self.ctx.burst
        match action.kind:
            case ActionKind.FINALIZE:
                return {}, True
            case ActionKind.CONTINUE:
                if action.mode != self.mode:
                    self.switches = 0
                return self.burst(action.mode, action.n_steps), False
            case ActionKind.SWITCH:
                self.switches += 1
                return self.burst(action.mode, default), False
            case ActionKind.ROLLBACK:
                lr_x = self.session.state.lr_x
                self.manager.rollback(self.session.id, action.checkpoint_id)
                lr_x = self.manager.back_off(
                    self.session.id, lr_x, self.ctx.rollback_backoff, self.ctx.min_lr_x
                )
                result = {"rolled_back_to": action.checkpoint_id, "lr_x": lr_x}
                result.update(self.burst(self.mode, default))
                return result, False
            case ActionKind.TERMINATE_AND_BRANCH:
                parent = self.session.id
                self.manager.terminate(parent)
                index = self.manager.branches_used
                self.session = self._open_session("branch", index, parent)
                self.switches = 0
                self.mode = self.allowed_modes()[0]
                result = {"terminated": parent, "branch": self.session.id}
                result.update(self.burst(self.mode, default))
                return result, False
            case ActionKind.REFINE:
                return await self.refine(action.candidate_id), False
        raise SessionError(f"Unhandled action {action.kind}")

    async def refine(self, candidate_id: int) -> dict[str, Any]:
        source = self.manager.pool.get(candidate_id)
        self.refine_attempted.add(source.id)
        self.refinements_used += 1
        best_g = self.manager.find_checkpoint(source.checkpoint_id).state.g
        if self.known_channel is not None:
            best_g = self.known_channel
        mode = UpdateMode.IMAGE_ONLY if self.known_channel is not None else UpdateMode.JOINT
        outcome = await self.refiner.refine(
            source,
            best_g,
            self.manager,
            mode=mode,
            acquisition_steps=self.acquisition_steps,
            noise_floor=self.noise_floor,
        )
        if outcome.accepted:
            # The restored trajectory becomes the one the loop keeps working on.
            self.manager.terminate(self.session.id)
            self.session = self.manager.get(outcome.session_id)
            self.mode = mode
            self.switches = 0
        return {
            "source": source.id,
            "decision": outcome.decision,
            "reason": outcome.reason,
            "residual_before": outcome.residual_before,
            "residual_after": outcome.residual_after,
            "session": outcome.session_id,
            "candidate": outcome.candidate.id if outcome.candidate else None,
        }

    async def decide(self, s: StateSummary) -> Decision:
        if self.last_aborted:
            # NaN guard: the trajectory is unusable, move on without consulting the policy.
            action = TerminateAndBranch() if s.branches_left > 0 else Finalize()
            return Decision(action, "forced", "nan_guard", self.last_aborted)
        decision = await self.policy.decide(s)
        reason = self.check_legal(decision.action, s)
        if reason:
            click.echo(f"[eavesdrop] rejected {decision.action.kind}: {reason}", err=True)
            action, rule = rule_policy(s, self.ctx.thresholds)
            return Decision(action, "fallback", rule, f"illegal at execution: {reason}")
        return decision


async def run_attack(
    ctx: AttackContext,
    rng: Rng,
    *,
    perception: PerceptionAgent,
    refiner: RefinementAgent | None = None,
    policy: Policy | None = None,
    known_channel: CMatrix | None = None,
) -> AttackResult:
    """Run the closed loop until Finalize or until the budgets run out.

    ``known_channel`` turns the attack channel-aware: G̃ is pinned to it and
    only image updates run. Without it the attack is blind.
    """
    loop = _Loop(ctx, rng, perception, refiner, policy or RulePolicy(ctx.thresholds), known_channel)

    if ctx.budgets.max_steps >= 1:
        loop.session = loop._open_session("root", 0, None)
        loop.log(
            "decision",
            action=Continue(loop.mode, ctx.burst).to_dict(),
            source="forced",
            rule="initial",
            result=loop.burst(loop.mode, ctx.burst),
        )
        while True:
            await loop.score()
            summary = loop.summary()
            decision = await loop.decide(summary)
            try:
                result, finished = await loop.execute(decision.action)
            except BranchBudgetExhausted as exc:
                result, finished = {"refused": exc.message}, True
            loop.log(
                "decision",
                action=decision.action.to_dict(),
                source=decision.source,
                rule=decision.rule,
                note=decision.note,
                summary=summary.model_dump(),
                result=result,
            )
            if finished or result.get("skipped"):
                break

    manager = loop.manager
    chosen = select_final(manager.pool, gate=ctx.residual_gate, noise_floor=loop.noise_floor)
    common = dict(
        pool=manager.pool,
        audit=loop.audit,
        steps_used=manager.steps_spent,
        branches_used=manager.branches_used,
        refinements_used=loop.refinements_used,
        manager=manager,
    )
    if chosen is None:
        reason = "candidate pool is empty" + (
            f" (last burst aborted: {loop.last_aborted})" if loop.last_aborted else ""
        )
        loop.log("finalize", status="failed", reason=reason)
        return AttackResult("failed", None, None, reason=reason, **common)
    loop.log("finalize", status="ok", candidate=chosen.id, residual=chosen.data_residual)
    return AttackResult("ok", chosen.image, chosen, **common)
