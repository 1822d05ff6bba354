"""Trial construction, baselines, the attack methods and SNR sweeps.

Seeding is order independent: the source image of a trial comes from
(master seed, trial), the channel block from (master seed, SNR, trial) and
the attacker's randomness from (master seed, method, SNR, trial). Running
trials in parallel or resuming a sweep therefore never changes a row.
"""

from __future__ import annotations

import csv
import functools
import time
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import anyio
import click
import numpy as np

from eavesdrop.channel import (
    ChannelConfig,
    Interception,
    Transmission,
    intercept,
    transmit,
    zf_noise_variance,
    zf_receive,
)
from eavesdrop.config import ExperimentConfig, MethodId
from eavesdrop.errors import (
    ConfigError,
    EavesdropError,
    GenerationUnavailableError,
    InvalidArgumentError,
    JudgeUnavailableError,
    SingularMatrixError,
)
from eavesdrop.image import Image, ToyEmbedding, check_image, read_image, synth_face
from eavesdrop.inversion import MAX_BURST, UpdateMode
from eavesdrop.metrics import (
    AGGREGATE_COLUMNS,
    CellSummary,
    TrialReport,
    aggregate,
    evaluate,
)
from eavesdrop.numerics import Rng
from eavesdrop.orchestrator import (
    AttackContext,
    AttackResult,
    Budgets,
    LlmPolicy,
    Policy,
    RulePolicy,
    RuleThresholds,
    run_attack,
)
from eavesdrop.perception import (
    FusionWeights,
    HeuristicJudge,
    IqaCalibration,
    Judge,
    PerceptionAgent,
    WireJudge,
)
from eavesdrop.refinement import (
    AdversarialGenerator,
    DenoiseGenerator,
    FacePriorGenerator,
    Generator,
    IdentityGenerator,
    RefinementAgent,
    WireGenerator,
)
from eavesdrop.semcom import EncoderHandle, bob_decode, encode, gain, make_encoder
from eavesdrop.session import SessionManager, StagnationConfig
from eavesdrop.wire import AgentTransport, WireClient

CSV_COLUMNS = (
    "method",
    "snr_db",
    "trial",
    "seed",
    "psnr",
    "ms_ssim",
    "cosine",
    "success",
    "steps",
    "wall_ms",
    "status",
    "reason",
)

# ── Trial setup ──────────────────────────────────────────────────────────────


def encoder_for(cfg: ExperimentConfig) -> EncoderHandle:
    e = cfg.encoder
    return make_encoder(
        e.kind,
        cfg.image.shape,
        cfg.channel.n_t,
        e.bcr,
        e.seed,
        hidden=e.hidden,
        power_norm=e.power_norm,
    )


def _ppm_files(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise ConfigError(f"No .ppm files in image directory {directory}")
    return files


def source_image(cfg: ExperimentConfig, trial: int) -> Image:
    if cfg.image.source == "synthetic":
        rng = Rng(cfg.master_seed).child("image", trial)
        return synth_face(rng, cfg.image.height, cfg.image.width)
    files = _ppm_files(cfg.image.directory)
    return check_image(read_image(files[trial % len(files)]), cfg.image.shape)


def channel_config(cfg: ExperimentConfig, snr_db: float) -> ChannelConfig:
    c = cfg.channel
    return ChannelConfig(c.n_t, c.n_r, c.n_e, snr_db, eve_snr_db=snr_db + c.eve_snr_offset_db)


def transmit_block(
    cfg: ExperimentConfig, enc: EncoderHandle, x: Image, snr_db: float, trial: int
) -> Transmission:
    """Transmit one block, resampling channels whose H is not full column rank."""
    ccfg = channel_config(cfg, snr_db)
    z = encode(enc, x)
    rng = Rng(cfg.master_seed).child("channel", snr_db, trial)
    for attempt in range(cfg.channel.max_resamples + 1):
        trans = transmit(z, ccfg, rng.child(attempt))
        try:
            zf_receive(trans, trans.h)
        except SingularMatrixError:
            click.echo(
                f"[eavesdrop] singular legitimate channel (snr={snr_db:g} trial={trial}), "
                f"resampling ({attempt + 1}/{cfg.channel.max_resamples})",
                err=True,
            )
            continue
        return trans
    raise SingularMatrixError(
        f"Legitimate channel singular after {cfg.channel.max_resamples} resamples"
    )


def attack_rng(cfg: ExperimentConfig, method: MethodId, snr_db: float, trial: int) -> Rng:
    return Rng(cfg.master_seed).child("attack", str(method), snr_db, trial)


# ── Agents ───────────────────────────────────────────────────────────────────


@functools.lru_cache(maxsize=8)
def _heuristic_judge(height: int, width: int, seed: int) -> HeuristicJudge:
    return HeuristicJudge(height, width, seed)


def _client(
    cfg: ExperimentConfig,
    name: str,
    system_prompt: str,
    endpoint: str | None,
    unavailable_error: type = JudgeUnavailableError,
) -> WireClient:
    transport = AgentTransport(
        system_prompt, endpoint=endpoint, model=cfg.clients.model, timeout=cfg.clients.timeout
    )
    return WireClient(
        transport,
        name=name,
        retries=cfg.clients.retries,
        max_in_flight=cfg.clients.max_in_flight,
        unavailable_error=unavailable_error,
    )


def calibration_for(cfg: ExperimentConfig) -> IqaCalibration:
    values = cfg.perception.calibration
    if values is None:
        return IqaCalibration()
    try:
        return IqaCalibration(**values)
    except TypeError as exc:
        raise ConfigError(f"perception.calibration: {exc}") from None
    except InvalidArgumentError as exc:
        raise ConfigError(f"perception.calibration: {exc.message}") from None


def build_judge(cfg: ExperimentConfig) -> Judge:
    if cfg.perception.judge == "llm":
        return WireJudge(_client(cfg, "judge", "judge.md", cfg.clients.judge_url))
    return _heuristic_judge(cfg.image.height, cfg.image.width, cfg.perception.judge_seed)


def build_generator(cfg: ExperimentConfig) -> Generator:
    match cfg.refinement.generator:
        case "identity":
            return IdentityGenerator()
        case "prior":
            return FacePriorGenerator(cfg.refinement.shrinkage)
        case "adversarial":
            return AdversarialGenerator()
        case "llm":
            client = _client(
                cfg,
                "generator",
                "generate.md",
                cfg.clients.generator_url,
                GenerationUnavailableError,
            )
            return WireGenerator(client)
    return DenoiseGenerator()


def build_perception(cfg: ExperimentConfig, judge: Judge) -> PerceptionAgent:
    p = cfg.perception
    weights = FusionWeights(p.w_q, p.w_e, p.tau_plausible)
    return PerceptionAgent(judge, calibration=calibration_for(cfg), weights=weights)


def build_refiner(
    cfg: ExperimentConfig, judge: Judge, perception: PerceptionAgent
) -> RefinementAgent:
    r = cfg.refinement
    return RefinementAgent(
        judge,
        build_generator(cfg),
        perception,
        budget=r.budget,
        accept_ratio=r.accept_ratio,
        directive=r.directive,
        lr_x=r.lr_x,
        min_fidelity=r.min_fidelity,
    )


def thresholds_for(cfg: ExperimentConfig) -> RuleThresholds:
    p = cfg.policy
    return RuleThresholds(improvement=p.improvement, score_drop=p.score_drop, burst=p.burst)


def build_policy(cfg: ExperimentConfig) -> Policy:
    fallback = RulePolicy(thresholds_for(cfg))
    if cfg.policy.kind == "llm":
        return LlmPolicy(_client(cfg, "policy", "policy.md", cfg.clients.policy_url), fallback)
    return fallback


def attack_context(
    cfg: ExperimentConfig, interception: Interception, enc: EncoderHandle
) -> AttackContext:
    b = cfg.budgets
    return AttackContext(
        interception=interception,
        enc=enc,
        image_shape=cfg.image.shape,
        budgets=Budgets(b.max_steps, b.max_branches, b.max_refinements),
        policy_id=cfg.policy.kind,
        burst=cfg.policy.burst,
        lambda_tv=cfg.inversion.lambda_tv,
        lr_x=cfg.inversion.lr_x,
        lr_g=cfg.inversion.lr_g,
        acquisition_steps=cfg.inversion.acquisition_steps,
        rollback_backoff=cfg.inversion.rollback_backoff,
        min_lr_x=cfg.inversion.min_lr_x,
        stagnation=StagnationConfig(cfg.session.window, cfg.session.epsilon),
        thresholds=thresholds_for(cfg),
        warm_branch=cfg.policy.warm_branch,
        residual_gate=cfg.refinement.residual_gate,
    )


# ── Methods ──────────────────────────────────────────────────────────────────


@dataclass
class MethodRun:
    image: Image | None
    steps: int
    status: str = "ok"
    reason: str = ""
    attack: AttackResult | None = None


def _manager(
    cfg: ExperimentConfig, interception: Interception, enc: EncoderHandle
) -> SessionManager:
    return SessionManager(
        enc,
        interception.r,
        cfg.image.shape,
        max_branches=0,
        entry_variance=interception.stats.entry_variance,
        lambda_tv=cfg.inversion.lambda_tv,
        lr_x=cfg.inversion.lr_x,
        lr_g=cfg.inversion.lr_g,
    )


def run_mia(
    cfg: ExperimentConfig,
    interception: Interception,
    enc: EncoderHandle,
    rng: Rng,
    known_channel: np.ndarray | None = None,
) -> tuple[MethodRun, SessionManager]:
    """Single-session inversion for a fixed number of steps.

    Blind runs update image and channel jointly; with ``known_channel`` the
    channel estimate is fixed and only the image is updated.
    """
    manager = _manager(cfg, interception, enc)
    x0, g0 = manager.fresh_variables(rng.child("root", 0))
    mode = UpdateMode.JOINT
    if known_channel is not None:
        g0, mode = known_channel, UpdateMode.IMAGE_ONLY
    session = manager.start(x0, g0)
    remaining = cfg.mia_steps
    reason = ""
    while remaining > 0:
        outcome = manager.advance(session.id, mode, min(remaining, MAX_BURST))
        remaining -= min(remaining, MAX_BURST)
        if outcome.burst.aborted:
            reason = outcome.burst.reason
            break
    entries = manager.pool.entries()
    if not entries:
        return MethodRun(None, manager.steps_spent, "failed", reason or "no candidate"), manager
    return MethodRun(entries[-1].image, manager.steps_spent, reason=reason), manager


def run_bob(
    enc: EncoderHandle, trans: Transmission, x: Image, shape: tuple[int, int], snr_db: float
) -> MethodRun:
    z_hat = zf_receive(trans, trans.h)
    nv = zf_noise_variance(trans.h, snr_db)
    result = bob_decode(enc, z_hat, shape, gain=gain(enc, x), noise_variance=nv)
    reason = "degenerate codeword" if result.degenerate else ""
    if not result.converged:
        reason = "decoder did not converge"
    return MethodRun(result.image, 0, reason=reason)


async def _genrefine(
    cfg: ExperimentConfig,
    interception: Interception,
    enc: EncoderHandle,
    rng: Rng,
    g: np.ndarray,
) -> MethodRun:
    base, manager = run_mia(cfg, interception, enc, rng, known_channel=g)
    if base.image is None:
        return base
    judge = build_judge(cfg)
    refiner = build_refiner(cfg, judge, build_perception(cfg, judge))
    generated, reason = await refiner.prepare(manager.pool.entries()[-1])
    if generated is None:
        return MethodRun(base.image, base.steps, reason=f"generation skipped: {reason}")
    return MethodRun(generated, base.steps)


async def _agentic(
    cfg: ExperimentConfig,
    method: MethodId,
    interception: Interception,
    enc: EncoderHandle,
    rng: Rng,
    g: np.ndarray,
    policy: Policy | None = None,
) -> MethodRun:
    judge = build_judge(cfg)
    perception = build_perception(cfg, judge)
    refiner = None
    if method != MethodId.AGENTIC_NOREFINE:
        refiner = build_refiner(cfg, judge, perception)
    result = await run_attack(
        attack_context(cfg, interception, enc),
        rng,
        perception=perception,
        refiner=refiner,
        policy=policy or build_policy(cfg),
        known_channel=g if method == MethodId.AGENTIC_CSI else None,
    )
    return MethodRun(result.image, result.steps_used, result.status, result.reason, result)


def run_method(
    cfg: ExperimentConfig,
    method: MethodId,
    snr_db: float,
    trial: int,
    source: Image | None = None,
    policy: Policy | None = None,
) -> tuple[MethodRun, Image]:
    """Run one method on one trial; returns the run and the source image used.

    ``policy`` overrides the configured policy of the agentic methods.
    """
    enc = encoder_for(cfg)
    x = source_image(cfg, trial) if source is None else check_image(source, cfg.image.shape)
    trans = transmit_block(cfg, enc, x, snr_db, trial)
    if method == MethodId.BOB:
        return run_bob(enc, trans, x, cfg.image.shape, snr_db), x

    interception = intercept(trans, channel_config(cfg, snr_db))
    rng = attack_rng(cfg, method, snr_db, trial)
    match method:
        case MethodId.MIA_NOCSI:
            return run_mia(cfg, interception, enc, rng)[0], x
        case MethodId.MIA_CSI:
            return run_mia(cfg, interception, enc, rng, known_channel=trans.g)[0], x
        case MethodId.GENREFINE_CSI:
            run = functools.partial(_genrefine, cfg, interception, enc, rng, trans.g)
            return anyio.run(run), x
    run = functools.partial(_agentic, cfg, method, interception, enc, rng, trans.g, policy)
    return anyio.run(run), x


def run_trial(cfg: ExperimentConfig, method: MethodId, snr_db: float, trial: int) -> TrialReport:
    """One CSV row. Library errors become a failed row instead of aborting."""
    seed = attack_rng(cfg, method, snr_db, trial).fingerprint()
    started = time.perf_counter()
    try:
        run, x = run_method(cfg, method, snr_db, trial)
        if run.image is None:
            raise EavesdropError(run.reason or "attack produced no reconstruction")
        ev = evaluate(x, run.image, ToyEmbedding())
    except EavesdropError as exc:
        nan = float("nan")
        return TrialReport(
            str(method), snr_db, trial, seed, nan, nan, nan, False, 0,
            _wall_ms(cfg, started), "failed", exc.message,
        )  # fmt: skip
    return TrialReport(
        method=str(method),
        snr_db=snr_db,
        trial=trial,
        seed=seed,
        psnr=ev.psnr,
        ms_ssim=ev.ms_ssim,
        cosine=ev.cosine,
        success=ev.success,
        steps=run.steps,
        wall_ms=_wall_ms(cfg, started),
        status=run.status,
        reason=run.reason,
    )


def _wall_ms(cfg: ExperimentConfig, started: float) -> int:
    if not cfg.record_wall_time:
        return 0
    return int(round((time.perf_counter() - started) * 1000))


# ── CSV ──────────────────────────────────────────────────────────────────────


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_row(report: TrialReport) -> list[str]:
    return [_fmt(getattr(report, col)) for col in CSV_COLUMNS]


def parse_row(row: dict[str, str]) -> TrialReport:
    try:
        return TrialReport(
            method=row["method"],
            snr_db=float(row["snr_db"]),
            trial=int(row["trial"]),
            seed=int(row["seed"]),
            psnr=float(row["psnr"]),
            ms_ssim=float(row["ms_ssim"]),
            cosine=float(row["cosine"]),
            success=row["success"] == "true",
            steps=int(row["steps"]),
            wall_ms=int(row["wall_ms"]),
            status=row["status"],
            reason=row["reason"],
        )
    except (KeyError, ValueError) as exc:
        raise EavesdropError(f"Malformed result row {row!r}: {exc}") from None


def read_reports(path: Path) -> list[TrialReport]:
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise EavesdropError(
                f"{path} has columns {reader.fieldnames}, expected {list(CSV_COLUMNS)}"
            )
        return [parse_row(row) for row in reader]


def aggregate_path(rows_path: Path) -> Path:
    return rows_path.with_name(f"{rows_path.stem}-aggregate.csv")


def write_aggregate(summaries: list[CellSummary], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for s in summaries:
            writer.writerow([_fmt(getattr(s, col)) for col in AGGREGATE_COLUMNS])


# ── Sweep ────────────────────────────────────────────────────────────────────

Cell = tuple[MethodId, float, int]


def cells(cfg: ExperimentConfig) -> list[Cell]:
    """Full factorial methods × SNR grid × trials, in output order."""
    return [(m, snr, t) for m in cfg.methods for snr in cfg.snr_grid for t in range(cfg.trials)]


def _completed(path: Path) -> set[tuple[str, float, int]]:
    if not path.exists() or path.stat().st_size == 0:
        return set()
    return {(r.method, r.snr_db, r.trial) for r in read_reports(path)}


def _run_cell(cfg: ExperimentConfig, cell: Cell) -> TrialReport:
    return run_trial(cfg, *cell)


def _results(cfg: ExperimentConfig, todo: list[Cell]) -> Iterator[TrialReport]:
    if cfg.workers == 1 or len(todo) <= 1:
        for cell in todo:
            yield _run_cell(cfg, cell)
        return
    # map() yields in submission order, so the file order matches a serial run.
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        yield from pool.map(functools.partial(_run_cell, cfg), todo)


def sweep(cfg: ExperimentConfig, out: Path) -> list[CellSummary]:
    """Run every missing cell, append rows to ``out``, rewrite the aggregate file.

    Cells already present in ``out`` are skipped, so an interrupted sweep
    resumes where it stopped.
    """
    all_cells = cells(cfg)
    done = _completed(out)
    todo = [c for c in all_cells if (str(c[0]), c[1], c[2]) not in done]
    total = len(all_cells)
    finished = total - len(todo)
    if done:
        click.echo(f"[eavesdrop] resuming: {finished}/{total} cells already in {out}", err=True)

    out.parent.mkdir(parents=True, exist_ok=True)
    fresh = not done and (not out.exists() or out.stat().st_size == 0)
    with out.open("w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(CSV_COLUMNS)
        for cell, report in zip(todo, _results(cfg, todo)):
            writer.writerow(format_row(report))
            fh.flush()
            finished += 1
            method, snr, trial = cell
            click.echo(
                f"[eavesdrop] sweep {finished}/{total} method={method} snr={snr:g} "
                f"trial={trial} {report.status}",
                err=True,
            )

    summaries = aggregate(read_reports(out), [str(m) for m in cfg.methods])
    write_aggregate(summaries, aggregate_path(out))
    return summaries
