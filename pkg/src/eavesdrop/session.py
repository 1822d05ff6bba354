"""Session lifecycle: checkpoints, rollback, stagnation, branching and the candidate pool.

A session is one resumable inversion trajectory. The manager owns every
session of an attack, the shared candidate pool and the branch budget, and
keeps an audit of optimizer steps that rollbacks threw away so step budgets
can count them.
"""

from __future__ import annotations

import enum
import struct
import threading
from collections.abc import Iterator
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Literal

import numpy as np

from eavesdrop.errors import (
    BranchBudgetExhausted,
    InvalidArgumentError,
    SessionError,
)
from eavesdrop.image import Image, clip_unit
from eavesdrop.inversion import (
    AdamMoments,
    BurstResult,
    OptimState,
    UpdateMode,
    data_residual,
    loss,
    run_burst,
)
from eavesdrop.numerics import (
    CMatrix,
    Rng,
    sample_complex_gaussian,
    stack_complex,
    unstack_complex,
)
from eavesdrop.semcom import EncoderHandle

if TYPE_CHECKING:
    from eavesdrop.perception import FusedFeedback

DEFAULT_WINDOW = 5
DEFAULT_EPSILON = 1e-3
DEFAULT_MAX_BRANCHES = 5
BRANCH_JITTER = 0.05


# ── Stagnation ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class StagnationConfig:
    window: int = DEFAULT_WINDOW
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.window < 2:
            raise InvalidArgumentError(f"Stagnation window must be >= 2, got {self.window}")
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"Stagnation threshold must be > 0, got {self.epsilon}")


def is_stagnant(history: list[float], cfg: StagnationConfig) -> bool:
    """Flat over the last ``window`` burst-end losses and no better than the best so far.

    Flat means (max - min) / max < epsilon inside the window; an all-zero
    window counts as flat.
    """
    if not history:
        raise InvalidArgumentError("Stagnation check needs a non-empty history")
    if len(history) < cfg.window:
        return False
    recent = history[-cfg.window :]
    hi, lo = max(recent), min(recent)
    flat = True if hi == 0 else (hi - lo) / hi < cfg.epsilon
    return flat and history[-1] >= min(history) * (1.0 - cfg.epsilon)


# ── Sessions ─────────────────────────────────────────────────────────────────


class SessionStatus(enum.StrEnum):
    ACTIVE = "active"
    TERMINATED = "terminated"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class Checkpoint:
    id: str
    session_id: str
    step: int
    loss: float
    state: OptimState


@dataclass(frozen=True)
class DiscardedSegment:
    """Steps thrown away by a rollback or by discarding a whole session."""

    session_id: str
    from_step: int
    to_step: int
    losses: tuple[float, ...]
    reason: str

    @property
    def steps(self) -> int:
        return self.to_step - self.from_step


@dataclass
class Session:
    id: str
    state: OptimState
    parent_id: str | None = None
    origin: Literal["root", "branch", "reanchor"] = "root"
    mode: UpdateMode = UpdateMode.JOINT
    status: SessionStatus = SessionStatus.ACTIVE
    history: list[float] = field(default_factory=list)
    burst_ends: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.history)

    @property
    def burst_end_losses(self) -> list[float]:
        return [value for _, value in self.burst_ends]

    @property
    def active(self) -> bool:
        return self.status is SessionStatus.ACTIVE

    def find_checkpoint(self, checkpoint_id: str) -> Checkpoint:
        for cp in self.checkpoints:
            if cp.id == checkpoint_id:
                return cp
        raise SessionError(f"Checkpoint '{checkpoint_id}' does not belong to session '{self.id}'")


# ── Candidate pool ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Candidate:
    """Immutable snapshot of an image with its provenance.

    ``image`` is clipped to [0, 1] and read-only. Refined candidates carry
    the residual of their source image before and after re-anchoring.
    """

    id: int
    image: Image
    data_residual: float
    session_id: str
    step: int
    origin: Literal["raw", "refined"] = "raw"
    checkpoint_id: str | None = None
    source_id: int | None = None
    residual_before: float | None = None
    residual_after: float | None = None


class CandidatePool:
    """Append-only, insertion-ordered store shared by every session of an attack.

    Appends and score attachment are serialized through one lock so that
    concurrent producers see a single arrival order.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[Candidate] = []
        self._scores: dict[int, FusedFeedback] = {}

    def append(
        self, image: Image, data_residual: float, session_id: str, step: int, **provenance
    ) -> Candidate:
        snapshot = clip_unit(image)
        snapshot.setflags(write=False)
        with self._lock:
            cand = Candidate(
                id=len(self._entries),
                image=snapshot,
                data_residual=float(data_residual),
                session_id=session_id,
                step=step,
                **provenance,
            )
            self._entries.append(cand)
        return cand

    def attach_scores(self, candidate_id: int, feedback: FusedFeedback) -> None:
        with self._lock:
            if not 0 <= candidate_id < len(self._entries):
                raise SessionError(f"Unknown candidate {candidate_id}")
            if candidate_id in self._scores:
                raise SessionError(f"Candidate {candidate_id} is already scored")
            self._scores[candidate_id] = feedback

    def scores(self, candidate_id: int) -> FusedFeedback | None:
        with self._lock:
            return self._scores.get(candidate_id)

    def unscored(self) -> list[Candidate]:
        with self._lock:
            return [c for c in self._entries if c.id not in self._scores]

    def get(self, candidate_id: int) -> Candidate:
        with self._lock:
            return self._entries[candidate_id]

    def entries(self) -> list[Candidate]:
        with self._lock:
            return list(self._entries)

    def min_residual(self) -> float:
        entries = self.entries()
        if not entries:
            raise SessionError("Candidate pool is empty")
        return min(c.data_residual for c in entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.entries())


# ── Manager ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BurstOutcome:
    burst: BurstResult
    checkpoint: Checkpoint | None = None
    candidate: Candidate | None = None


class SessionManager:
    """Owns the sessions of one attack against one interception."""

    def __init__(
        self,
        enc: EncoderHandle,
        r: CMatrix,
        image_shape: tuple[int, int],
        *,
        pool: CandidatePool | None = None,
        stagnation: StagnationConfig | None = None,
        max_branches: int = DEFAULT_MAX_BRANCHES,
        entry_variance: float = 1.0,
        lambda_tv: float | None = None,
        lr_x: float | None = None,
        lr_g: float | None = None,
    ):
        if 3 * image_shape[0] * image_shape[1] != enc.n_input:
            raise InvalidArgumentError(
                f"Image shape {image_shape} does not match encoder input {enc.n_input}"
            )
        self.enc = enc
        self.r = r
        self.image_shape = tuple(image_shape)
        self.pool = pool if pool is not None else CandidatePool()
        self.stagnation = stagnation or StagnationConfig()
        self.max_branches = max_branches
        self.entry_variance = entry_variance
        self._hyper = {
            k: v
            for k, v in (("lambda_tv", lambda_tv), ("lr_x", lr_x), ("lr_g", lr_g))
            if v is not None
        }
        self.sessions: dict[str, Session] = {}
        self.discarded: list[DiscardedSegment] = []
        self.branches_used = 0
        self.steps_spent = 0

    # ── Creation ──

    def _new_session(self, state: OptimState, **kwargs) -> Session:
        session = Session(id=f"s{len(self.sessions)}", state=state, **kwargs)
        self.sessions[session.id] = session
        return session

    def start(
        self,
        x0: Image,
        g0: CMatrix,
        *,
        parent_id: str | None = None,
        origin: Literal["root", "branch", "reanchor"] = "root",
        moments_from: OptimState | None = None,
        lr_x: float | None = None,
    ) -> Session:
        """New session from explicit variables.

        With ``moments_from`` the Adam moments and counters are taken from
        that state, so the trajectory continues instead of restarting Adam.
        ``lr_x`` overrides the manager's image step size for this session.
        """
        hyper = self._hyper if lr_x is None else {**self._hyper, "lr_x": lr_x}
        state = OptimState.initial(x0, g0, **hyper)
        if moments_from is not None:
            state = OptimState(
                x=state.x,
                g=state.g,
                adam_x=_copy_moments(moments_from.adam_x),
                adam_g=_copy_moments(moments_from.adam_g),
                lambda_tv=state.lambda_tv,
                lr_x=state.lr_x,
                lr_g=state.lr_g,
            )
        return self._new_session(state, parent_id=parent_id, origin=origin)

    def fresh_variables(self, rng: Rng, warm_image: Image | None = None) -> tuple[Image, CMatrix]:
        """Channel draw from the known wiretap statistics plus an image init.

        The image is mid-gray with small Gaussian jitter, or a copy of
        ``warm_image`` for warm branches.
        """
        g = sample_complex_gaussian(
            rng.child("G"), self.r.shape[0], self.enc.n_t, self.entry_variance
        )
        if warm_image is not None:
            return np.array(warm_image, dtype=np.float64), g
        jitter = rng.child("x").generator.standard_normal((3, *self.image_shape))
        return 0.5 + BRANCH_JITTER * jitter, g

    def branch(
        self, rng: Rng, *, parent_id: str | None = None, warm_image: Image | None = None
    ) -> Session:
        """New session with a fresh channel estimate; counts against the branch budget."""
        if self.branches_used >= self.max_branches:
            raise BranchBudgetExhausted(
                f"Branch budget of {self.max_branches} exhausted; finalize instead"
            )
        if parent_id is not None and parent_id not in self.sessions:
            raise SessionError(f"Unknown parent session '{parent_id}'")
        x0, g0 = self.fresh_variables(rng, warm_image)
        self.branches_used += 1
        return self.start(x0, g0, parent_id=parent_id, origin="branch")

    # ── Lookup ──

    def get(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise SessionError(f"Unknown session '{session_id}'") from None

    def _active(self, session_id: str) -> Session:
        session = self.get(session_id)
        if not session.active:
            raise SessionError(f"Session '{session_id}' is {session.status}")
        return session

    @property
    def branches_left(self) -> int:
        return self.max_branches - self.branches_used

    # ── Trajectory operations ──

    def advance(
        self, session_id: str, mode: UpdateMode, n_steps: int, *, emit: bool = True
    ) -> BurstOutcome:
        """Run a burst and checkpoint its end (unless the NaN guard fired).

        With ``emit=False`` the burst end is neither checkpointed nor put
        into the pool; re-anchoring decides that after its verdict.
        """
        session = self._active(session_id)
        result = run_burst(session.state, mode, n_steps, self.r, self.enc)
        session.state = result.state
        session.mode = mode
        session.history.extend(rec.total for rec in result.trace)
        self.steps_spent += len(result.trace)
        if result.aborted:
            return BurstOutcome(result)
        end_loss = loss(session.state, self.r, self.enc).total
        session.burst_ends.append((session.step, end_loss))
        if not emit:
            return BurstOutcome(result)
        cp = self._snapshot(session, end_loss)
        return BurstOutcome(result, cp, self._emit(session, cp))

    def checkpoint(self, session_id: str) -> tuple[Checkpoint, Candidate]:
        """Deep snapshot of the optimizer state; also emits a pool candidate."""
        session = self._active(session_id)
        cp = self._snapshot(session, loss(session.state, self.r, self.enc).total)
        return cp, self._emit(session, cp)

    def snapshot(self, session_id: str) -> Checkpoint:
        """Checkpoint without a pool candidate."""
        session = self._active(session_id)
        return self._snapshot(session, loss(session.state, self.r, self.enc).total)

    def _snapshot(self, session: Session, current_loss: float) -> Checkpoint:
        if session.checkpoints and session.checkpoints[-1].step > session.step:
            raise SessionError("Checkpoints must be ordered by step")
        cp = Checkpoint(
            id=f"{session.id}/k{len(session.checkpoints)}",
            session_id=session.id,
            step=session.step,
            loss=current_loss,
            state=session.state.deep_copy(),
        )
        session.checkpoints.append(cp)
        return cp

    def _emit(self, session: Session, cp: Checkpoint) -> Candidate:
        image = clip_unit(cp.state.x)
        residual = data_residual(image, cp.state.g, self.r, self.enc)
        return self.pool.append(image, residual, session.id, cp.step, checkpoint_id=cp.id)

    def rollback(self, session_id: str, checkpoint_id: str) -> Session:
        """Restore the snapshot bitwise and truncate history to it.

        Later checkpoints are dropped and the discarded steps are audited.
        """
        session = self._active(session_id)
        cp = session.find_checkpoint(checkpoint_id)
        if session.step > cp.step:
            self.discarded.append(
                DiscardedSegment(
                    session_id=session.id,
                    from_step=cp.step,
                    to_step=session.step,
                    losses=tuple(session.history[cp.step :]),
                    reason=f"rollback to {cp.id}",
                )
            )
        session.state = cp.state.deep_copy()
        del session.history[cp.step :]
        session.burst_ends = [(s, v) for s, v in session.burst_ends if s <= cp.step]
        session.checkpoints = [c for c in session.checkpoints if c.step <= cp.step]
        return session

    def back_off(self, session_id: str, base: float, factor: float, floor: float) -> float:
        """Set the session's image step size to ``base * factor``, not below ``floor``.

        ``base`` is the step size before a rollback restored the older one, so
        repeated rollbacks keep shrinking it.
        """
        if not 0 < factor <= 1:
            raise InvalidArgumentError(f"Back-off factor must be in (0, 1], got {factor}")
        session = self._active(session_id)
        lr_x = max(base * factor, min(floor, base))
        session.state = replace(session.state, lr_x=lr_x)
        return lr_x

    def terminate(self, session_id: str) -> None:
        self.get(session_id).status = SessionStatus.TERMINATED

    def discard(self, session_id: str, reason: str) -> DiscardedSegment:
        """Terminate a session and audit its entire trajectory as thrown away."""
        session = self.get(session_id)
        session.status = SessionStatus.DISCARDED
        segment = DiscardedSegment(
            session_id=session.id,
            from_step=0,
            to_step=session.step,
            losses=tuple(session.history),
            reason=reason,
        )
        self.discarded.append(segment)
        return segment

    def session_is_stagnant(self, session_id: str) -> bool:
        ends = self.get(session_id).burst_end_losses
        return bool(ends) and is_stagnant(ends, self.stagnation)

    def find_checkpoint(self, checkpoint_id: str) -> Checkpoint:
        session_id = checkpoint_id.split("/", 1)[0]
        return self.get(session_id).find_checkpoint(checkpoint_id)

    def lineage(self) -> dict[str, str | None]:
        return {sid: s.parent_id for sid, s in self.sessions.items()}


def _copy_moments(m: AdamMoments) -> AdamMoments:
    return AdamMoments(m.m.copy(), m.v.copy(), m.t)


# ── Binary checkpoint layout ─────────────────────────────────────────────────
#
#   magic  b"EVCK"            4 bytes
#   version                   u16  (1)
#   C, H, W, N_e, N_t         5 x u32
#   step, t_x, t_g            3 x u64
#   loss, lambda_tv, lr_x, lr_g   4 x f64
#   id lengths (checkpoint, session)  2 x u16, then the UTF-8 bytes
#   x, m_x, v_x               3 x C·H·W  f64
#   G, m_G, v_G               3 x 2·N_e·N_t f64 (stacked [Re, Im])
#
# All integers and doubles little-endian.

CHECKPOINT_MAGIC = b"EVCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sH5I3Q4d2H")


def dump_checkpoint(cp: Checkpoint) -> bytes:
    st = cp.state
    c, h, w = st.x.shape
    n_e, n_t = st.g.shape
    cid = cp.id.encode("utf-8")
    sid = cp.session_id.encode("utf-8")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        c, h, w, n_e, n_t,
        cp.step, st.adam_x.t, st.adam_g.t,
        cp.loss, st.lambda_tv, st.lr_x, st.lr_g,
        len(cid), len(sid),
    )  # fmt: skip
    arrays = (st.x, st.adam_x.m, st.adam_x.v, stack_complex(st.g), st.adam_g.m, st.adam_g.v)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return header + cid + sid + payload


def load_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise SessionError(f"Checkpoint truncated: {len(data)} bytes, header needs {_HEADER.size}")
    (magic, version, c, h, w, n_e, n_t, step, t_x, t_g, loss_value, lambda_tv, lr_x, lr_g,
     cid_len, sid_len) = _HEADER.unpack_from(data)  # fmt: skip
    if magic != CHECKPOINT_MAGIC:
        raise SessionError(f"Not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise SessionError(f"Unsupported checkpoint version {version}")
    pos = _HEADER.size
    cid = data[pos : pos + cid_len].decode("utf-8")
    pos += cid_len
    sid = data[pos : pos + sid_len].decode("utf-8")
    pos += sid_len
    n_img = c * h * w
    n_ch = 2 * n_e * n_t
    expected = pos + 8 * (3 * n_img + 3 * n_ch)
    if len(data) != expected:
        raise SessionError(f"Checkpoint payload is {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    parts = np.split(flat, np.cumsum([n_img, n_img, n_img, n_ch, n_ch]))
    x, mx, vx = (p.reshape(c, h, w) for p in parts[:3])
    g, mg, vg = (p.reshape(2, n_e, n_t) for p in parts[3:])
    state = OptimState(
        x=x,
        g=unstack_complex(g),
        adam_x=AdamMoments(mx, vx, t_x),
        adam_g=AdamMoments(mg, vg, t_g),
        lambda_tv=lambda_tv,
        lr_x=lr_x,
        lr_g=lr_g,
    )
    return Checkpoint(id=cid, session_id=sid, step=step, loss=loss_value, state=state)
