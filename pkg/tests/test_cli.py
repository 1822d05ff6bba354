"""Tests for the eavesdrop command line."""

from __future__ import annotations

import json
from pathlib import Path
from unittest.mock import patch

import pytest
from click.testing import CliRunner

from eavesdrop import __version__
from eavesdrop.cli import eavesdrop
from eavesdrop.harness import CSV_COLUMNS

TINY = {
    "methods": ["bob", "mia_nocsi"],
    "snr_grid": [10],
    "trials": 1,
    "master_seed": 3,
    "mia_steps": 20,
    "budgets": {"max_steps": 80, "max_branches": 1, "max_refinements": 1},
    "policy": {"burst": 20},
}


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _invoke(*args: str):
    with patch("eavesdrop.cli.setup_signal_handlers", return_value=True):
        return CliRunner().invoke(eavesdrop, [str(a) for a in args])


class TestBasics:
    def test_version(self):
        result = _invoke("version")
        assert result.exit_code == 0
        assert result.output.strip() == __version__

    def test_unknown_command(self):
        assert _invoke("explode").exit_code == 2

    def test_invalid_config_is_usage_error(self, tmp_path: Path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"trials": 0}')
        result = _invoke("sweep", bad)
        assert result.exit_code == 2
        assert "trials" in result.output

    def test_missing_config(self, tmp_path: Path):
        assert _invoke("sweep", tmp_path / "missing.json").exit_code == 2


class TestSweepCommand:
    def test_writes_rows_and_aggregate(self, tiny_config: Path, tmp_path: Path):
        out = tmp_path / "rows.csv"
        result = _invoke("sweep", tiny_config, "--out", out)
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        assert (tmp_path / "rows-aggregate.csv").exists()
        assert "mia_nocsi" in result.stdout


class TestAttackCommand:
    def test_mia_writes_images(self, tiny_config: Path, tmp_path: Path):
        out = tmp_path / "mia"
        result = _invoke("attack", tiny_config, "--method", "mia_nocsi", "--out", out)
        assert result.exit_code == 0, result.output
        assert (out / "reconstruction.ppm").read_bytes().startswith(b"P6")
        assert (out / "source.ppm").exists()
        assert not (out / "audit.jsonl").exists()

    def test_agentic_writes_audit_and_pool(self, tiny_config: Path, tmp_path: Path):
        out = tmp_path / "agentic"
        result = _invoke("attack", tiny_config, "--out", out)
        assert result.exit_code == 0, result.output
        audit = [json.loads(line) for line in (out / "audit.jsonl").read_text().splitlines()]
        assert audit[-1]["event"] == "finalize"
        pool = json.loads((out / "pool.json").read_text())
        assert sum(row["chosen"] for row in pool) == 1

    def test_replay_reproduces_reconstruction(self, tiny_config: Path, tmp_path: Path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert _invoke("attack", tiny_config, "--out", first).exit_code == 0
        result = _invoke(
            "attack", tiny_config, "--out", second, "--replay", first / "audit.jsonl"
        )
        assert result.exit_code == 0, result.output
        recon = "reconstruction.ppm"
        assert (first / recon).read_bytes() == (second / recon).read_bytes()

    def test_explicit_image(self, tiny_config: Path, tmp_path: Path):
        first = tmp_path / "first"
        _invoke("attack", tiny_config, "--method", "mia_csi", "--out", first)
        again = tmp_path / "again"
        result = _invoke(
            "attack", tiny_config, "--method", "mia_csi", "--out", again,
            "--image", first / "source.ppm",
        )  # fmt: skip
        assert result.exit_code == 0, result.output
        assert (again / "source.ppm").read_bytes() == (first / "source.ppm").read_bytes()

    def test_bob_is_not_an_attack(self, tiny_config: Path, tmp_path: Path):
        result = _invoke("attack", tiny_config, "--method", "bob", "--out", tmp_path / "x")
        assert result.exit_code == 2


class TestDiagnostics:
    def test_gradcheck(self, tiny_config: Path):
        result = _invoke("gradcheck", tiny_config, "--cases", "1")
        assert result.exit_code == 0, result.output
        assert "All gradients match." in result.stdout
        assert "mlp" in result.stdout

    def test_calibrate_prints_json(self, tiny_config: Path):
        result = _invoke("calibrate", tiny_config, "--samples", "4")
        assert result.exit_code == 0, result.output
        cal = json.loads(result.stdout)
        assert cal["sharpness_hi"] > cal["sharpness_lo"]
