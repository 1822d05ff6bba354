"""Post-hoc evaluation against the source image and per-cell aggregation.

Nothing in here is reachable from the attack loop; the harness calls it
after an attack has finalized.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass

import click
import numpy as np

from eavesdrop.errors import InvalidArgumentError
from eavesdrop.image import Image, ToyEmbedding, check_image, cosine_sim, embed, ms_ssim, psnr

SUCCESS_THRESHOLD = 0.7
WILSON_Z = 1.959963984540054


@dataclass(frozen=True)
class Evaluation:
    psnr: float
    ms_ssim: float
    cosine: float

    @property
    def success(self) -> bool:
        return self.cosine >= SUCCESS_THRESHOLD


@dataclass(frozen=True)
class TrialReport:
    method: str
    snr_db: float
    trial: int
    seed: int
    psnr: float
    ms_ssim: float
    cosine: float
    success: bool
    steps: int
    wall_ms: int
    status: str = "ok"
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def evaluate(x_source: Image, x_hat: Image, embedding: ToyEmbedding) -> Evaluation:
    check_image(x_source)
    check_image(x_hat)
    if x_source.shape != x_hat.shape:
        raise InvalidArgumentError(
            f"Reconstruction is {x_hat.shape}, source is {x_source.shape}"
        )
    a, b = embed(x_source, embedding), embed(x_hat, embedding)
    cosine = 0.0 if a.degenerate or b.degenerate else cosine_sim(a, b)
    return Evaluation(psnr(x_source, x_hat), ms_ssim(x_source, x_hat), cosine)


# ── Aggregation ──────────────────────────────────────────────────────────────


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clamped to [0, 1]."""
    if n <= 0:
        raise InvalidArgumentError(f"Wilson interval needs n >= 1, got {n}")
    if not 0 <= successes <= n:
        raise InvalidArgumentError(f"Successes {successes} outside [0, {n}]")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi


@dataclass(frozen=True)
class CellSummary:
    method: str
    snr_db: float
    count: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    mean_psnr: float
    mean_ms_ssim: float
    mean_cosine: float
    mean_steps: float
    failed: int


AGGREGATE_COLUMNS = (
    "method",
    "snr_db",
    "count",
    "successes",
    "success_rate",
    "ci_low",
    "ci_high",
    "mean_psnr",
    "mean_ms_ssim",
    "mean_cosine",
    "mean_steps",
    "failed",
)


def _sort_key(key: tuple[str, float], order: dict[str, int]) -> tuple[int, str, float]:
    method, snr = key
    return order.get(method, len(order)), method, snr


def aggregate(
    reports: Iterable[TrialReport], method_order: Iterable[str] = ()
) -> list[CellSummary]:
    """Per-(method, SNR) means, surrogate success rate and its Wilson interval.

    Failed trials are counted in ``failed`` but excluded from the rates;
    a cell without any completed trial is omitted with a warning. The
    result does not depend on report order.
    """
    groups: dict[tuple[str, float], list[TrialReport]] = {}
    for report in reports:
        groups.setdefault((report.method, report.snr_db), []).append(report)

    order = {m: i for i, m in enumerate(method_order)}
    summaries = []
    for key in sorted(groups, key=lambda k: _sort_key(k, order)):
        rows = sorted(groups[key], key=lambda r: r.trial)
        done = [r for r in rows if r.ok]
        failed = len(rows) - len(done)
        if not done:
            click.echo(
                f"[eavesdrop] aggregate: no completed trials for method={key[0]} "
                f"snr={key[1]:g}; cell omitted",
                err=True,
            )
            continue
        successes = sum(r.success for r in done)
        lo, hi = wilson_interval(successes, len(done))
        summaries.append(
            CellSummary(
                method=key[0],
                snr_db=key[1],
                count=len(done),
                successes=successes,
                success_rate=successes / len(done),
                ci_low=lo,
                ci_high=hi,
                mean_psnr=float(np.mean([r.psnr for r in done])),
                mean_ms_ssim=float(np.mean([r.ms_ssim for r in done])),
                mean_cosine=float(np.mean([r.cosine for r in done])),
                mean_steps=float(np.mean([r.steps for r in done])),
                failed=failed,
            )
        )
    return summaries
