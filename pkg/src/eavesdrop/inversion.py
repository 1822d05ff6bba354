"""Joint semantic-and-channel inversion: loss, gradients, Adam and bursts.

Eve minimizes, over an image estimate x̃ and a wiretap channel estimate G̃,

    sum_t ||G̃ s_t(x̃) - r_t||^2 + lambda_tv · TV(x̃)

where s_t(x̃) are the transmit vectors of the glass-box encoder. The image
is optimized unconstrained; clipping happens only when a candidate is
snapshotted. The channel estimate is complex and is handled by Adam in its
stacked real form ``[Re, Im]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from eavesdrop.channel import wiretap_forward, wiretap_vjp
from eavesdrop.errors import InvalidArgumentError, NonFiniteError
from eavesdrop.image import TV_SMOOTHING, Image, total_variation, total_variation_grad
from eavesdrop.numerics import CMatrix, stack_complex, unstack_complex
from eavesdrop.semcom import EncoderHandle, encode_with_vjp, flatten_codeword, reshape_codeword

DEFAULT_LR_X = 5e-2
DEFAULT_LR_G = 1e-2
DEFAULT_LAMBDA_TV = 5e-4
DEFAULT_BURST = 40
MAX_BURST = 1000

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class UpdateMode(enum.StrEnum):
    IMAGE_ONLY = "ImageOnly"
    CHANNEL_ONLY = "ChannelOnly"
    JOINT = "Joint"


# ── Adam ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> AdamMoments:
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    moments: AdamMoments,
    lr: float,
) -> tuple[np.ndarray, AdamMoments]:
    """One bias-corrected Adam step; inputs are never modified."""
    t = moments.t + 1
    m = BETA1 * moments.m + (1.0 - BETA1) * grad
    v = BETA2 * moments.v + (1.0 - BETA2) * grad * grad
    m_hat = m / (1.0 - BETA1**t)
    v_hat = v / (1.0 - BETA2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + EPSILON), AdamMoments(m, v, t)


# ── State ────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class OptimState:
    """Decision variables and optimizer moments of one trajectory.

    Updates are functional: every step returns a new state and no array held
    by an existing state is written to. The channel moments live in the
    stacked real shape ``(2, N_e, N_t)``.
    """

    x: Image
    g: CMatrix
    adam_x: AdamMoments
    adam_g: AdamMoments
    lambda_tv: float = DEFAULT_LAMBDA_TV
    lr_x: float = DEFAULT_LR_X
    lr_g: float = DEFAULT_LR_G

    def __post_init__(self) -> None:
        if self.lambda_tv < 0:
            raise InvalidArgumentError(f"lambda_tv must be >= 0, got {self.lambda_tv}")
        # A zero rate freezes a group numerically while its moments still advance.
        if self.lr_x < 0 or self.lr_g < 0:
            raise InvalidArgumentError("Learning rates must be non-negative")
        if self.adam_x.m.shape != self.x.shape:
            raise InvalidArgumentError("Image moments do not match the image variable")
        if self.adam_g.m.shape != (2, *self.g.shape):
            raise InvalidArgumentError("Channel moments do not match the channel variable")

    @classmethod
    def initial(
        cls,
        x: Image,
        g: CMatrix,
        *,
        lambda_tv: float = DEFAULT_LAMBDA_TV,
        lr_x: float = DEFAULT_LR_X,
        lr_g: float = DEFAULT_LR_G,
    ) -> OptimState:
        x = np.array(x, dtype=np.float64)
        g = np.array(g, dtype=np.complex128)
        return cls(
            x=x,
            g=g,
            adam_x=AdamMoments.zeros(x.shape),
            adam_g=AdamMoments.zeros((2, *g.shape)),
            lambda_tv=lambda_tv,
            lr_x=lr_x,
            lr_g=lr_g,
        )

    def deep_copy(self) -> OptimState:
        return replace(
            self,
            x=self.x.copy(),
            g=self.g.copy(),
            adam_x=AdamMoments(self.adam_x.m.copy(), self.adam_x.v.copy(), self.adam_x.t),
            adam_g=AdamMoments(self.adam_g.m.copy(), self.adam_g.v.copy(), self.adam_g.t),
        )


def states_equal(a: OptimState, b: OptimState) -> bool:
    """Bitwise equality of variables, moments, counters and hyperparameters."""
    return (
        np.array_equal(a.x, b.x)
        and np.array_equal(a.g, b.g)
        and all(
            np.array_equal(getattr(ma, k), getattr(mb, k))
            for ma, mb in ((a.adam_x, b.adam_x), (a.adam_g, b.adam_g))
            for k in ("m", "v")
        )
        and a.adam_x.t == b.adam_x.t
        and a.adam_g.t == b.adam_g.t
        and (a.lambda_tv, a.lr_x, a.lr_g) == (b.lambda_tv, b.lr_x, b.lr_g)
    )


# ── Loss and gradients ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class LossRecord:
    total: float
    data_residual: float
    tv_term: float


@dataclass(frozen=True)
class _Evaluation:
    record: LossRecord
    grad_x: Image
    grad_g: CMatrix


def _evaluate(
    x: Image, g: CMatrix, lambda_tv: float, r: CMatrix, enc: EncoderHandle
) -> _Evaluation:
    z, vjp = encode_with_vjp(enc, x)
    s = reshape_codeword(z, enc.n_t, enc.t)
    err = wiretap_forward(g, s) - r
    data = float(np.vdot(err, err).real)
    tv = lambda_tv * total_variation(x, mu=TV_SMOOTHING) if lambda_tv else 0.0
    grad_g, grad_s = wiretap_vjp(g, s, 2.0 * err)
    grad_x = vjp(flatten_codeword(grad_s))
    if lambda_tv:
        grad_x = grad_x + lambda_tv * total_variation_grad(x, mu=TV_SMOOTHING)
    return _Evaluation(LossRecord(data + tv, data, tv), grad_x, grad_g)


def data_residual(x: Image, g: CMatrix, r: CMatrix, enc: EncoderHandle) -> float:
    """sum_t ||G̃ s_t(x) - r_t||^2 alone."""
    return _evaluate(x, g, 0.0, r, enc).record.data_residual


def loss(state: OptimState, r: CMatrix, enc: EncoderHandle) -> LossRecord:
    """Total objective with its data and (smoothed) TV parts."""
    return _evaluate(state.x, state.g, state.lambda_tv, r, enc).record


def gradients(state: OptimState, r: CMatrix, enc: EncoderHandle) -> tuple[Image, CMatrix]:
    """(grad_x, grad_G) of the total objective.

    ``grad_G`` holds d/dRe + i·d/dIm, so G̃ - eta·grad_G is a descent step.
    """
    ev = _evaluate(state.x, state.g, state.lambda_tv, r, enc)
    return ev.grad_x, ev.grad_g


def _check_finite(ev: _Evaluation) -> None:
    if not np.isfinite(ev.record.total):
        raise NonFiniteError(f"Loss became non-finite ({ev.record.total})")
    if not (np.all(np.isfinite(ev.grad_x)) and np.all(np.isfinite(ev.grad_g))):
        raise NonFiniteError("Gradient contains non-finite values")


def step(
    state: OptimState, mode: UpdateMode, r: CMatrix, enc: EncoderHandle
) -> tuple[OptimState, LossRecord]:
    """One Adam step on the group(s) selected by ``mode``.

    The returned record is the loss *before* the update. The frozen group's
    variables, moments and step counter are carried over untouched.
    """
    ev = _evaluate(state.x, state.g, state.lambda_tv, r, enc)
    _check_finite(ev)
    x, adam_x = state.x, state.adam_x
    g, adam_g = state.g, state.adam_g
    if mode in (UpdateMode.IMAGE_ONLY, UpdateMode.JOINT):
        x, adam_x = adam_update(state.x, ev.grad_x, state.adam_x, state.lr_x)
    if mode in (UpdateMode.CHANNEL_ONLY, UpdateMode.JOINT):
        g_stacked, adam_g = adam_update(
            stack_complex(state.g), stack_complex(ev.grad_g), state.adam_g, state.lr_g
        )
        g = unstack_complex(g_stacked)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(g))):
        raise NonFiniteError("Update produced non-finite variables")
    return replace(state, x=x, g=g, adam_x=adam_x, adam_g=adam_g), ev.record


@dataclass(frozen=True)
class BurstResult:
    state: OptimState
    trace: list[LossRecord] = field(default_factory=list)
    aborted: bool = False
    reason: str = ""

    @property
    def totals(self) -> list[float]:
        return [rec.total for rec in self.trace]


def run_burst(
    state: OptimState,
    mode: UpdateMode,
    n_steps: int,
    r: CMatrix,
    enc: EncoderHandle,
) -> BurstResult:
    """``n_steps`` sequential steps. A NaN guard stops early with a partial trace."""
    if not 1 <= n_steps <= MAX_BURST:
        raise InvalidArgumentError(f"Burst length must be in [1, {MAX_BURST}], got {n_steps}")
    trace: list[LossRecord] = []
    for _ in range(n_steps):
        try:
            state, record = step(state, mode, r, enc)
        except NonFiniteError as exc:
            return BurstResult(state, trace, aborted=True, reason=exc.message)
        trace.append(record)
    return BurstResult(state, trace)
