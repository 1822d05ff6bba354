"""Signal handlers so an interrupted sweep or attack shuts down cleanly.

SIGTERM and SIGINT raise SystemExit, which lets open result files flush
and close through their context managers. A sweep interrupted this way
resumes from its row file.
"""

from __future__ import annotations

import signal

import click


def _graceful_exit(signum: int, frame: object) -> None:  # noqa: ARG001
    raise SystemExit(128 + signum)


def setup_signal_handlers() -> bool:
    """Register the handlers; returns False when that is not possible.

    Only effective in the main thread (signal.signal raises ValueError
    elsewhere). Safe to call repeatedly.
    """
    try:
        signal.signal(signal.SIGTERM, _graceful_exit)
        signal.signal(signal.SIGINT, _graceful_exit)
    except (ValueError, OSError):
        click.echo("[eavesdrop] Could not register signal handlers (not main thread?)", err=True)
        return False
    return True
