"""eavesdrop CLI: thin entry point over the harness."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import click

from eavesdrop.config import ExperimentConfig, MethodId, demo_config, load_config
from eavesdrop.errors import EavesdropError
from eavesdrop.harness import aggregate_path, run_method, sweep
from eavesdrop.image import read_image, write_image
from eavesdrop.orchestrator import AttackResult, ReplayPolicy
from eavesdrop.signals import setup_signal_handlers

ATTACK_METHODS = (
    MethodId.AGENTIC,
    MethodId.AGENTIC_NOREFINE,
    MethodId.AGENTIC_CSI,
    MethodId.MIA_NOCSI,
    MethodId.MIA_CSI,
    MethodId.GENREFINE_CSI,
)

_CONFIG = click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))


# ── Main group ───────────────────────────────────────────────────────────────


@click.group()
def eavesdrop():
    """Agentic eavesdropping simulator for MIMO semantic image transmission."""


@eavesdrop.command("version")
def version_cmd():
    """Print installed version."""
    from eavesdrop import __version__

    click.echo(__version__)


# ── sweep ────────────────────────────────────────────────────────────────────


def _print_summaries(summaries) -> None:
    for s in summaries:
        click.echo(
            f"{s.method:<17} snr={s.snr_db:>5g}  success={s.success_rate:.2f} "
            f"[{s.ci_low:.2f}, {s.ci_high:.2f}]  n={s.count}  cos={s.mean_cosine:.3f}  "
            f"psnr={s.mean_psnr:.2f}"
        )


@eavesdrop.command("sweep")
@_CONFIG
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Row CSV (default: results/<config name>.csv). Existing rows are kept.",
)
def sweep_cmd(config: Path, out: Path | None):
    """Run methods × SNR grid × trials and write the row and aggregate CSVs."""
    cfg = load_config(config)
    out = out or Path("results") / f"{config.stem}.csv"
    setup_signal_handlers()
    summaries = sweep(cfg, out)
    _print_summaries(summaries)
    click.echo(f"Rows: {out}")
    click.echo(f"Aggregate: {aggregate_path(out)}")


# ── attack ───────────────────────────────────────────────────────────────────


def _pool_summary(result: AttackResult) -> list[dict]:
    rows = []
    for cand in result.pool:
        fb = result.pool.scores(cand.id)
        rows.append(
            {
                "id": cand.id,
                "session": cand.session_id,
                "step": cand.step,
                "origin": cand.origin,
                "data_residual": cand.data_residual,
                "source_id": cand.source_id,
                "fused": fb.fused if fb else None,
                "plausible": fb.plausible if fb else None,
                "chosen": result.candidate is not None and cand.id == result.candidate.id,
            }
        )
    return rows


def _write_attack_outputs(out: Path, result: AttackResult) -> None:
    with (out / "audit.jsonl").open("w") as fh:
        for record in result.audit:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    (out / "pool.json").write_text(json.dumps(_pool_summary(result), indent=2) + "\n")
    refined = [c for c in result.pool if c.origin == "refined"]
    if refined:
        best = max(refined, key=lambda c: (result.pool.scores(c.id).fused, -c.id))
        write_image(best.image, out / "refined.ppm")


def _load_audit(path: Path) -> list[dict]:
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise click.BadParameter(f"cannot read audit log {path}: {exc}") from None


def _attack(
    cfg: ExperimentConfig,
    method: MethodId,
    snr: float,
    trial: int,
    out: Path,
    image: Path | None = None,
    replay: Path | None = None,
) -> Path:
    source = read_image(image) if image else None
    policy = ReplayPolicy(_load_audit(replay)) if replay else None
    run, x = run_method(cfg, method, snr, trial, source=source, policy=policy)
    out.mkdir(parents=True, exist_ok=True)
    write_image(x, out / "source.ppm")
    if run.attack is not None:
        _write_attack_outputs(out, run.attack)
    if run.image is None:
        raise EavesdropError(f"Attack failed: {run.reason}")
    target = out / "reconstruction.ppm"
    write_image(run.image, target)
    return target


@eavesdrop.command("attack")
@_CONFIG
@click.option(
    "--image",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Source PPM (default: the config's image for --trial).",
)
@click.option("--snr", type=float, default=None, help="SNR in dB (default: last grid value).")
@click.option(
    "--method",
    type=click.Choice([str(m) for m in ATTACK_METHODS]),
    default=str(MethodId.AGENTIC),
    show_default=True,
)
@click.option("--trial", type=int, default=0, show_default=True)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("attack-out"),
    show_default=True,
)
@click.option(
    "--replay",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Replay the decisions of a saved audit.jsonl instead of asking the policy.",
)
def attack_cmd(
    config: Path,
    image: Path | None,
    snr: float | None,
    method: str,
    trial: int,
    out: Path,
    replay: Path | None,
):
    """Run one attack; write reconstruction, source, audit log and pool summary."""
    cfg = load_config(config)
    setup_signal_handlers()
    snr = cfg.snr_grid[-1] if snr is None else snr
    target = _attack(cfg, MethodId(method), snr, trial, out, image=image, replay=replay)
    click.echo(f"Reconstruction: {target}")


# ── gradcheck / calibrate ────────────────────────────────────────────────────


@eavesdrop.command("gradcheck")
@_CONFIG
@click.option("--cases", type=click.IntRange(min=1), default=20, show_default=True)
def gradcheck_cmd(config: Path, cases: int):
    """Compare analytic gradients with central finite differences."""
    from eavesdrop.gradcheck import TOLERANCE, run_suite

    cfg = load_config(config)
    results = run_suite(
        cfg.master_seed,
        cases=cases,
        lambda_tv=cfg.inversion.lambda_tv,
        power_norm=cfg.encoder.power_norm,
    )
    for kind in ("linear", "mlp"):
        mine = [r for r in results if r.kind == kind]
        worst_x = max(r.error_x for r in mine)
        worst_g = max(r.error_g for r in mine)
        click.echo(
            f"{kind:<6} cases={len(mine)}  max_err_x={worst_x:.2e}  max_err_g={worst_g:.2e}"
        )
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(f"{r.kind}#{r.case}" for r in failed)
        raise EavesdropError(f"{len(failed)} case(s) above {TOLERANCE:g}: {names}")
    click.echo("All gradients match.")


@eavesdrop.command("calibrate")
@_CONFIG
@click.option("--samples", type=click.IntRange(min=2), default=200, show_default=True)
def calibrate_cmd(config: Path, samples: int):
    """Print IQA calibration bounds for the config's image size.

    The JSON can be pasted into the config as ``perception.calibration``.
    """
    from eavesdrop.numerics import Rng
    from eavesdrop.perception import calibrate

    cfg = load_config(config)
    rng = Rng(cfg.master_seed).child("calibrate")
    cal = calibrate(rng, cfg.image.height, cfg.image.width, n_clean=samples, n_noise=samples)
    click.echo(json.dumps(asdict(cal), indent=2))


# ── demo ─────────────────────────────────────────────────────────────────────


@eavesdrop.command("demo")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("demo-out"),
    show_default=True,
)
def demo_cmd(out: Path):
    """Tiny built-in experiment: a one-trial sweep and one written attack."""
    cfg = demo_config()
    out.mkdir(parents=True, exist_ok=True)
    rows = out / "demo.csv"
    rows.unlink(missing_ok=True)
    setup_signal_handlers()
    _print_summaries(sweep(cfg, rows))
    target = _attack(cfg, MethodId.AGENTIC, cfg.snr_grid[0], 0, out / "attack")
    click.echo(f"Rows: {rows}")
    click.echo(f"Reconstruction: {target}")


if __name__ == "__main__":
    eavesdrop()
