"""Experiment configuration: one JSON document, validated at load.

A config plus the code version determines every output byte of a sweep.
Client endpoints can be overridden from the environment without touching
the file.
"""

from __future__ import annotations

import enum
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from eavesdrop.errors import ConfigError, InvalidArgumentError
from eavesdrop.image import CHANNELS
from eavesdrop.semcom import solve_block_length

_ENV_JUDGE_URL = "EAVESDROP_JUDGE_URL"
_ENV_GENERATOR_URL = "EAVESDROP_GENERATOR_URL"
_ENV_POLICY_URL = "EAVESDROP_POLICY_URL"

CONFIG_SCHEMA_VERSION = "1"


class MethodId(enum.StrEnum):
    BOB = "bob"
    MIA_NOCSI = "mia_nocsi"
    MIA_CSI = "mia_csi"
    AGENTIC_NOREFINE = "agentic_norefine"
    AGENTIC = "agentic"
    AGENTIC_CSI = "agentic_csi"
    GENREFINE_CSI = "genrefine_csi"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ImageSection(_Section):
    source: Literal["synthetic", "directory"] = "synthetic"
    directory: Path | None = None
    height: int = Field(16, ge=16)
    width: int = Field(16, ge=16)

    @model_validator(mode="after")
    def _directory_given(self) -> ImageSection:
        if self.source == "directory" and self.directory is None:
            raise ValueError("image.source 'directory' needs image.directory")
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def n_input(self) -> int:
        return CHANNELS * self.height * self.width


class EncoderSection(_Section):
    kind: Literal["linear", "mlp"] = "linear"
    seed: int = Field(0xE2C0, ge=0)
    bcr: str = "1/12"
    hidden: int = Field(256, ge=1)
    power_norm: Literal["global", "per_stream"] = "global"


class ChannelSection(_Section):
    n_t: int = Field(2, ge=1)
    n_r: int = Field(2, ge=1)
    n_e: int = Field(2, ge=1)
    eve_snr_offset_db: float = 0.0
    max_resamples: int = Field(8, ge=0)

    @model_validator(mode="after")
    def _zero_forcing(self) -> ChannelSection:
        if self.n_r < self.n_t:
            raise ValueError(f"channel.n_r ({self.n_r}) must be >= channel.n_t ({self.n_t})")
        return self


class InversionSection(_Section):
    lambda_tv: float = Field(5e-4, ge=0)
    lr_x: float = Field(5e-2, ge=0)
    lr_g: float = Field(1e-2, ge=0)
    acquisition_steps: int = Field(200, ge=0, le=1000)
    rollback_backoff: float = Field(0.5, gt=0, le=1)
    min_lr_x: float = Field(1e-3, ge=0)


class SessionSection(_Section):
    window: int = Field(5, ge=2)
    epsilon: float = Field(0.3, gt=0)


class PerceptionSection(_Section):
    judge: Literal["heuristic", "llm"] = "heuristic"
    judge_seed: int = Field(0x7E4D, ge=0)
    w_q: float = Field(0.4, ge=0)
    w_e: float = Field(0.6, ge=0)
    tau_plausible: float = Field(0.35, ge=0, le=1)
    calibration: dict[str, float] | None = None

    @model_validator(mode="after")
    def _weights_sum(self) -> PerceptionSection:
        if abs(self.w_q + self.w_e - 1.0) > 1e-9:
            total = self.w_q + self.w_e
            raise ValueError(f"perception.w_q + perception.w_e must be 1, got {total}")
        return self


class RefinementSection(_Section):
    generator: Literal["identity", "denoise", "prior", "adversarial", "llm"] = "prior"
    budget: int = Field(120, ge=1, le=1000)
    accept_ratio: float = Field(1.1, gt=0)
    residual_gate: float = Field(2.0, ge=1)
    lr_x: float = Field(1e-2, gt=0)
    min_fidelity: float = Field(0.3, ge=-1, le=1)
    shrinkage: float = Field(1e-2, gt=0)
    directive: str = "Do not add new details that are not visible in the reference image."


class PolicySection(_Section):
    kind: Literal["rule", "llm"] = "rule"
    burst: int = Field(40, ge=20, le=80)
    improvement: float = Field(0.03, ge=0)
    score_drop: float = Field(0.1, ge=0)
    warm_branch: bool = False


class BudgetSection(_Section):
    max_steps: int = Field(4000, ge=0)
    max_branches: int = Field(5, ge=0)
    max_refinements: int = Field(10, ge=0)


class ClientSection(_Section):
    judge_url: str | None = None
    generator_url: str | None = None
    policy_url: str | None = None
    model: str | None = None
    timeout: float = Field(60.0, gt=0)
    retries: int = Field(2, ge=0)
    max_in_flight: int = Field(4, ge=1)


class ExperimentConfig(_Section):
    schema_version: Literal["1"] = CONFIG_SCHEMA_VERSION
    image: ImageSection = ImageSection()
    encoder: EncoderSection = EncoderSection()
    channel: ChannelSection = ChannelSection()
    inversion: InversionSection = InversionSection()
    session: SessionSection = SessionSection()
    perception: PerceptionSection = PerceptionSection()
    refinement: RefinementSection = RefinementSection()
    policy: PolicySection = PolicySection()
    budgets: BudgetSection = BudgetSection()
    clients: ClientSection = ClientSection()
    methods: list[MethodId] = Field(default_factory=lambda: list(MethodId), min_length=1)
    snr_grid: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 20.0], min_length=1)
    trials: int = Field(20, ge=1)
    master_seed: int = Field(0, ge=0, lt=1 << 64)
    mia_steps: int = Field(4000, ge=1)
    workers: int = Field(1, ge=1)
    record_wall_time: bool = False

    @model_validator(mode="after")
    def _block_length(self) -> ExperimentConfig:
        try:
            solve_block_length(self.encoder.bcr, self.image.n_input, self.channel.n_t)
        except (InvalidArgumentError, ValueError, ZeroDivisionError) as exc:
            message = exc.message if isinstance(exc, InvalidArgumentError) else str(exc)
            raise ValueError(f"encoder.bcr: {message}") from None
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if len(set(self.snr_grid)) != len(self.snr_grid):
            raise ValueError("snr_grid must not repeat")
        return self

    @property
    def block_length(self) -> int:
        return solve_block_length(self.encoder.bcr, self.image.n_input, self.channel.n_t)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<config>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """Endpoint overrides from EAVESDROP_*_URL win over the file."""
    updates = {
        field: os.environ[env]
        for field, env in (
            ("judge_url", _ENV_JUDGE_URL),
            ("generator_url", _ENV_GENERATOR_URL),
            ("policy_url", _ENV_POLICY_URL),
        )
        if os.environ.get(env)
    }
    if not updates:
        return cfg
    return cfg.model_copy(update={"clients": cfg.clients.model_copy(update=updates)})


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {source}:\n{_format_errors(exc)}") from None
    return apply_env(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def demo_config() -> ExperimentConfig:
    """Tiny built-in setup for ``eavesdrop demo``."""
    return apply_env(
        ExperimentConfig(
            methods=[MethodId.BOB, MethodId.MIA_NOCSI, MethodId.AGENTIC],
            snr_grid=[20.0],
            trials=1,
            master_seed=7,
            mia_steps=400,
            inversion=InversionSection(acquisition_steps=80),
            refinement=RefinementSection(budget=60),
            budgets=BudgetSection(max_steps=400, max_branches=2, max_refinements=1),
        )
    )
