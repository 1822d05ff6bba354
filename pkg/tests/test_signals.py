"""Tests for graceful-exit signal handling."""

from __future__ import annotations

import signal
import threading

import pytest

from eavesdrop.signals import _graceful_exit, setup_signal_handlers


@pytest.fixture
def restore_handlers():
    saved = {s: signal.getsignal(s) for s in (signal.SIGTERM, signal.SIGINT)}
    yield
    for s, handler in saved.items():
        signal.signal(s, handler)


class TestSignals:
    def test_registers_in_main_thread(self, restore_handlers):  # noqa: ARG002
        assert setup_signal_handlers()
        assert signal.getsignal(signal.SIGTERM) is _graceful_exit
        assert signal.getsignal(signal.SIGINT) is _graceful_exit

    def test_worker_thread_is_reported(self, capsys):
        results = []
        t = threading.Thread(target=lambda: results.append(setup_signal_handlers()))
        t.start()
        t.join()
        assert results == [False]
        assert "Could not register" in capsys.readouterr().err

    def test_handler_exits_with_signal_code(self):
        with pytest.raises(SystemExit) as exc:
            _graceful_exit(signal.SIGTERM, None)
        assert exc.value.code == 128 + signal.SIGTERM
