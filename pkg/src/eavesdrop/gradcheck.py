"""Finite-difference check of the inversion gradients on tiny instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eavesdrop.channel import ChannelConfig, transmit
from eavesdrop.inversion import DEFAULT_LAMBDA_TV, OptimState, gradients, loss
from eavesdrop.numerics import (
    Rng,
    finite_diff_gradient,
    relative_error,
    sample_complex_gaussian,
    stack_complex,
    unstack_complex,
)
from eavesdrop.semcom import EncoderKind, PowerNorm, encode, make_encoder

TOLERANCE = 1e-5
TINY_SHAPE = (4, 4)
TINY_BCR = "1/2"
TINY_HIDDEN = 16
CASES_PER_KIND = 20


@dataclass(frozen=True)
class GradCheck:
    kind: str
    case: int
    error_x: float
    error_g: float

    @property
    def passed(self) -> bool:
        return self.error_x < TOLERANCE and self.error_g < TOLERANCE


def check_case(
    kind: EncoderKind,
    rng: Rng,
    *,
    lambda_tv: float = DEFAULT_LAMBDA_TV,
    power_norm: PowerNorm = "global",
    snr_db: float = 10.0,
) -> tuple[float, float]:
    """Relative errors of the analytic image and channel gradients."""
    enc = make_encoder(
        kind, TINY_SHAPE, 2, TINY_BCR, rng.child("enc").fingerprint(),
        hidden=TINY_HIDDEN, power_norm=power_norm,
    )  # fmt: skip
    shape = (3, *TINY_SHAPE)
    x_true = rng.child("x_true").generator.uniform(0.0, 1.0, shape)
    trans = transmit(encode(enc, x_true), ChannelConfig(2, 2, 2, snr_db), rng.child("channel"))
    x = rng.child("x").generator.uniform(0.0, 1.0, shape)
    g = sample_complex_gaussian(rng.child("G"), 2, 2, 1.0)
    state = OptimState.initial(x, g, lambda_tv=lambda_tv)
    grad_x, grad_g = gradients(state, trans.r, enc)

    def f_x(v: np.ndarray) -> float:
        return loss(OptimState.initial(v, g, lambda_tv=lambda_tv), trans.r, enc).total

    def f_g(v: np.ndarray) -> float:
        state_g = OptimState.initial(x, unstack_complex(v), lambda_tv=lambda_tv)
        return loss(state_g, trans.r, enc).total

    fd_x = finite_diff_gradient(f_x, x)
    fd_g = finite_diff_gradient(f_g, stack_complex(g))
    return relative_error(grad_x, fd_x), relative_error(stack_complex(grad_g), fd_g)


def run_suite(
    seed: int = 0,
    *,
    cases: int = CASES_PER_KIND,
    lambda_tv: float = DEFAULT_LAMBDA_TV,
    power_norm: PowerNorm = "global",
) -> list[GradCheck]:
    results = []
    for kind in ("linear", "mlp"):
        for i in range(cases):
            ex, eg = check_case(
                kind, Rng(seed).child("gradcheck", kind, i),
                lambda_tv=lambda_tv, power_norm=power_norm,
            )  # fmt: skip
            results.append(GradCheck(kind, i, ex, eg))
    return results
