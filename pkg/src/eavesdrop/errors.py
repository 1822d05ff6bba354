"""Exception hierarchy for eavesdrop.

Every library error derives from click's exception classes so that an
error escaping into the CLI prints ``Error: <message>`` and exits with the
right code (1 for runtime failures, 2 for configuration/usage problems)
without a translation layer.
"""

from __future__ import annotations

import click


class EavesdropError(click.ClickException):
    """Base class for runtime failures (exit code 1)."""


class InvalidArgumentError(EavesdropError):
    """A precondition on an argument was violated."""


class SingularMatrixError(EavesdropError):
    """Least-squares system is rank deficient."""


class DegenerateCodewordError(EavesdropError):
    """Encoder raw output has (numerically) zero norm."""


class NonFiniteError(EavesdropError):
    """NaN guard: a loss or gradient became non-finite."""


class PpmFormatError(EavesdropError):
    """Malformed PPM file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SessionError(EavesdropError):
    """Illegal session operation (unknown checkpoint, terminated session)."""


class BranchBudgetExhausted(SessionError):
    """No branch budget left; the orchestrator must finalize."""


# ── Wire protocol ────────────────────────────────────────────────────────────


class WireError(EavesdropError):
    """Base class for judge/generator/policy protocol failures."""


class TransportError(WireError):
    """A single exchange failed (timeout, connection, error result). Retryable."""


class ServiceUnavailableError(WireError):
    """Retries exhausted."""


class JudgeUnavailableError(ServiceUnavailableError):
    """The multimodal judge could not be reached."""


class GenerationUnavailableError(ServiceUnavailableError):
    """The restoration generator could not be reached or answered badly."""


class SchemaViolationError(WireError):
    """Response document does not match its schema. Never retried."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{message}: field '{field}'")
        self.field = field


# ── Configuration ────────────────────────────────────────────────────────────


class ConfigError(click.UsageError):
    """Invalid experiment configuration (exit code 2)."""
