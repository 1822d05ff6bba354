"""Path resolution for shipped data (prompts, schemas, configs)."""

from __future__ import annotations

import os
from pathlib import Path

_ENV_DATA_DIR = "EAVESDROP_DATA_DIR"


def _data_dir() -> Path:
    """Return the directory holding prompts/, schemas/ and configs/.

    EAVESDROP_DATA_DIR wins when set. Otherwise the installed package data
    is used, then the source checkout root (running from a clone).
    """
    val = os.environ.get(_ENV_DATA_DIR)
    if val:
        return Path(val)

    pkg_data = Path(__file__).resolve().parent / "data"
    if (pkg_data / "prompts").is_dir():
        return pkg_data

    dev_root = Path(__file__).resolve().parents[2]
    if (dev_root / "prompts").is_dir():
        return dev_root

    return pkg_data


def _read_prompt(name: str, data_dir: Path | None = None) -> str:
    """Read a prompt file, return empty string if missing."""
    path = (data_dir or _data_dir()) / "prompts" / name
    return path.read_text() if path.exists() else ""

