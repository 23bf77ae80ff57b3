"""Configuration for chaoscope.

`Settings` holds process-level options read from the environment. The other
models describe one estimation, sweep or training run and are validated from
the flat `key = value` run files handled in `chaoscope.runconfig`.
"""

import logging
from pathlib import Path
from typing import Literal, Self

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)


def _split_list(v: object) -> object:
    """Parse a comma-separated string into a list of stripped items."""
    if isinstance(v, str):
        return [x.strip() for x in v.split(",") if x.strip()]
    return v


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="CHAOSCOPE_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    out_dir: Path = Field(
        default=Path("results"),
        description="Default output directory when a run sets neither --out nor `out`",
    )
    log_level: str = Field(default="INFO", description="Root log level")
    log_file: Path | None = Field(default=None, description="Optional log file")
    workers: int = Field(
        default=1,
        ge=1,
        description="Threads used for independent samples and episodes",
    )

    # OpenTelemetry / Instrumentation
    otel_enabled: bool = Field(
        default=False,
        description="Enable OpenTelemetry instrumentation",
    )
    otel_exporter_endpoint: str = Field(
        default="http://localhost:4318",
        description="OTLP exporter endpoint (e.g., otel-tui, Jaeger)",
    )


def get_settings() -> Settings:
    """Get application settings."""
    return Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpectrumConfig(_Section):
    """Benettin estimator constants."""

    timesteps: int = Field(default=1000, ge=1, description="Total timesteps T")
    iterations: int = Field(default=100, ge=1, description="Normalisation windows K")
    period: int = Field(default=10, ge=1, description="Steps between orthonormalisations")
    samples: int = Field(default=20, ge=1, description="Initial states per estimate")
    epsilon: float = Field(default=1e-4, gt=0.0, description="Perturbation size")
    tau0: float = Field(default=0.005, ge=0.0, description="Zero threshold in nats per step")
    transient: int = Field(default=0, ge=0, description="Steps discarded before estimation")
    orientation: Literal["identity", "random"] = Field(
        default="identity",
        description="Initial perturbation directions",
    )

    @model_validator(mode="after")
    def check_window_product(self) -> Self:
        """Require T = K * period."""
        if self.timesteps != self.iterations * self.period:
            msg = (
                f"timesteps ({self.timesteps}) must equal iterations * period "
                f"({self.iterations} * {self.period} = {self.iterations * self.period})"
            )
            raise ValueError(msg)
        return self

    @classmethod
    def from_windows(cls, iterations: int, period: int = 10, **kwargs: object) -> Self:
        """Build a config whose timesteps follow from iterations and period."""
        return cls.model_validate({"iterations": iterations, "period": period, "timesteps": iterations * period, **kwargs})


class NoiseConfig(_Section):
    """Gaussian observation noise added to the policy input only."""

    sigma: float = Field(default=0.0, ge=0.0, description="Per-dimension noise std in native units")
    seed: int = Field(default=0, ge=0)
    scale: list[float] | None = Field(
        default=None,
        description="Optional per-dimension multiplier applied on top of sigma",
    )

    @field_validator("scale", mode="before")
    @classmethod
    def parse_scale(cls, v: object) -> object:
        """Parse comma-separated string into list."""
        return _split_list(v)

    @field_validator("scale")
    @classmethod
    def check_scale(cls, v: list[float] | None) -> list[float] | None:
        """Reject negative multipliers and warn about all-zero ones."""
        if v is None:
            return v
        if any(x < 0 for x in v):
            msg = f"scale entries must be >= 0, got {v}"
            raise ValueError(msg)
        if v and not any(v):
            logger.warning("Noise scale is zero in every dimension; observations stay noiseless")
        return v


class TrainerConfig(_Section):
    """Regularized trainer settings."""

    members: int = Field(default=3, ge=2, description="Bundle size L")
    horizon: int = Field(default=15, ge=1, description="Imagination horizon T")
    gamma: float = Field(default=0.99, ge=0.0, lt=1.0)
    lam: float = Field(default=0.95, ge=0.0, le=1.0, description="lambda of the lambda-returns")
    eta: float = Field(default=3e-4, ge=0.0, description="Entropy weight")
    beta: float = Field(default=1.0, ge=0.0, description="MLE regularizer weight")
    learning_rate: float = Field(default=3e-3, gt=0.0)
    value_learning_rate: float = Field(default=1e-2, gt=0.0)
    grad_clip: float = Field(default=100.0, gt=0.0)
    batch: int = Field(default=8, ge=1, description="Start states per update")
    updates: int = Field(default=300, ge=1)
    mle_every: int = Field(default=50, ge=1, description="Updates between spectrum evaluations")
    return_decay: float = Field(default=0.99, ge=0.0, lt=1.0)
    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 64])
    recurrent_dim: int = Field(default=0, ge=0)
    init_log_std: float = Field(default=-1.0, ge=-5.0, le=2.0)
    init_action: list[float] | None = Field(
        default=None,
        description="Initial mean action; None keeps the centre of the action box",
    )
    seed: int = 0
    spectrum: SpectrumConfig = Field(
        default_factory=lambda: SpectrumConfig(timesteps=300, iterations=30, period=10, samples=1),
        description="Estimator used for the periodic MLE log",
    )

    @field_validator("hidden_sizes", "init_action", mode="before")
    @classmethod
    def parse_lists(cls, v: object) -> object:
        """Parse comma-separated strings into lists."""
        return _split_list(v)


class SweepConfig(_Section):
    """Observation-noise robustness sweep."""

    sigmas: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.5, 1.0])
    episodes: int = Field(default=80, ge=1)
    horizon: int = Field(default=1000, ge=1)
    resamples: int = Field(default=2000, ge=1)
    level: float = Field(default=0.95, gt=0.0, lt=1.0)

    @field_validator("sigmas", mode="before")
    @classmethod
    def parse_sigmas(cls, v: object) -> object:
        """Parse comma-separated string into list."""
        return _split_list(v)

    @field_validator("sigmas")
    @classmethod
    def check_sigmas(cls, v: list[float]) -> list[float]:
        """Reject negative noise levels."""
        if any(s < 0 for s in v):
            msg = f"sigmas must be >= 0, got {v}"
            raise ValueError(msg)
        return v


class DivergeConfig(_Section):
    """Twin-trajectory divergence curve."""

    epsilon: float = Field(default=1e-4, ge=0.0)
    steps: int = Field(default=1000, ge=1)
    fit_until: float = Field(
        default=1e-3,
        gt=0.0,
        description="Gap at which the log-slope annotation window ends",
    )


class LandscapeConfig(_Section):
    """Return obtained under initial perturbations of varying magnitude."""

    max_magnitude: float = Field(default=5e-4, gt=0.0)
    count: int = Field(default=101, ge=2)
    horizon: int = Field(default=1000, ge=1)
    extremes: int = Field(default=3, ge=1, description="Best and worst trajectories kept")


class AblationConfig(_Section):
    """Estimator ablation sweeps."""

    iterations: list[int] = Field(default_factory=lambda: [1, 10, 100])
    samples: list[int] = Field(default_factory=lambda: [1, 5, 20])
    repeats: int = Field(default=5, ge=1, description="Seeds per setting")

    @field_validator("iterations", "samples", mode="before")
    @classmethod
    def parse_lists(cls, v: object) -> object:
        """Parse comma-separated strings into lists."""
        return _split_list(v)
