"""Run files, presets and policy specifications.

A run file is a flat list of `key = value` lines. Keys are dotted paths into
`RunConfig` (`system.id`, `spectrum.period`, `trainer.spectrum.epsilon`);
`#` starts a comment and comma-separated values become lists. The special
key `preset` starts from one of the shipped presets, and later lines override
it. Unknown keys are errors reported with their line number.

Policies are named by a short spec string:

* `none`: the zero-action baseline
* `constant:v1,v2,...`: an open-loop constant action
* anything else: a path to a policy weight file, relative to the run file
"""

import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from chaoscope.config import (
    AblationConfig,
    DivergeConfig,
    LandscapeConfig,
    NoiseConfig,
    SpectrumConfig,
    SweepConfig,
    TrainerConfig,
)
from chaoscope.dynsys import DynamicalSystem, SystemConfig
from chaoscope.errors import ConfigError
from chaoscope.policy import PolicyParams, constant_policy, load_weights, no_action_policy

logger = logging.getLogger(__name__)

type Command = Literal["spectrum", "reward-mle", "diverge", "robustness", "train", "ablate", "landscape"]

_SYSTEM_IDS = frozenset({"logistic", "logistic_control", "henon", "lorenz", "pointmass", "cartpole", "linear"})


class RunConfig(BaseModel):
    """Everything one CLI command needs; echoed into every JSON report."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command | None = None
    system: SystemConfig
    policy: str = Field(default="none", description="Policy spec: none, constant:v,... or a weight file")
    compare: list[str] = Field(default_factory=list, description="Further policies for robustness comparisons")
    initial_state: list[float] | None = Field(
        default=None,
        description="Start state for diverge and landscape; drawn from the initial box when unset",
    )
    seed: int = Field(default=0, ge=0)
    workers: int | None = Field(default=None, ge=1)
    out: Path | None = None
    spectrum: SpectrumConfig = Field(default_factory=SpectrumConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    diverge: DivergeConfig = Field(default_factory=DivergeConfig)
    landscape: LandscapeConfig = Field(default_factory=LandscapeConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @field_validator("compare", "initial_state", mode="before")
    @classmethod
    def parse_lists(cls, v: object) -> object:
        """Parse comma-separated strings into lists."""
        if isinstance(v, str):
            return [x.strip() for x in v.split(",") if x.strip()]
        return v


PRESETS: dict[str, dict[str, str]] = {
    "logistic": {
        "system.id": "logistic",
        "policy": "constant:4.0",
        "spectrum.iterations": "10000",
        "spectrum.period": "10",
        "spectrum.timesteps": "100000",
        "spectrum.samples": "1",
        "spectrum.epsilon": "1e-8",
        "diverge.epsilon": "1e-10",
        "diverge.steps": "60",
    },
    "henon": {
        "system.id": "henon",
        "policy": "none",
        "spectrum.iterations": "10000",
        "spectrum.period": "1",
        "spectrum.timesteps": "10000",
        "spectrum.samples": "10",
        "diverge.epsilon": "1e-10",
        "diverge.steps": "200",
        "ablation.iterations": "1,10,100,1000",
        "ablation.samples": "1,5,20",
    },
    "lorenz": {
        "system.id": "lorenz",
        "policy": "none",
        "spectrum.iterations": "10000",
        "spectrum.period": "10",
        "spectrum.timesteps": "100000",
        "spectrum.samples": "3",
        "spectrum.transient": "1000",
        "diverge.epsilon": "1e-8",
        "diverge.steps": "3000",
        "diverge.fit_until": "1.0",
    },
    "pointmass": {
        "system.id": "pointmass",
        "system.damping": "0.0",
        "policy": "none",
        "spectrum.iterations": "500",
        "spectrum.period": "10",
        "spectrum.timesteps": "5000",
        "spectrum.samples": "5",
    },
    "cartpole": {
        "system.id": "cartpole",
        "system.task": "swingup",
        "policy": "none",
        "spectrum.iterations": "200",
        "spectrum.period": "10",
        "spectrum.timesteps": "2000",
        "spectrum.samples": "5",
        "landscape.horizon": "1000",
    },
    "logistic_control": {
        "system.id": "logistic_control",
        "policy": "constant:3.9",
        "spectrum.iterations": "100",
        "spectrum.period": "10",
        "spectrum.timesteps": "1000",
        "spectrum.samples": "5",
        "spectrum.epsilon": "1e-8",
        "trainer.init_action": "3.9",
        "trainer.hidden_sizes": "16,16",
        "trainer.updates": "200",
        "trainer.spectrum.iterations": "30",
        "trainer.spectrum.period": "10",
        "trainer.spectrum.timesteps": "300",
        "trainer.spectrum.epsilon": "1e-8",
        "sweep.sigmas": "0.0,0.01,0.05,0.1",
        "sweep.horizon": "200",
    },
    "linear": {
        "system.id": "linear",
        "system.rate": "0.9",
        "policy": "none",
        "spectrum.iterations": "30",
        "spectrum.period": "10",
        "spectrum.timesteps": "300",
        "spectrum.samples": "5",
        "spectrum.epsilon": "1e-8",
    },
}


def _nest(flat: Mapping[str, str]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                msg = f"{key}: '{part}' is a plain value, not a section"
                raise ConfigError(msg)
            node = child
        if isinstance(node.get(leaf), dict):
            msg = f"{key}: is a section, not a plain value"
            raise ConfigError(msg)
        node[leaf] = value
    return tree


def parse_config_text(text: str) -> tuple[dict[str, str], dict[str, int]]:
    """Split a run file into a flat key-value mapping and the line of every key.

    Raises:
        ConfigError: A line is neither blank, a comment nor `key = value`, or a key repeats.
    """
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            msg = f"line {lineno}: expected 'key = value', got {raw.strip()!r}"
            raise ConfigError(msg)
        if key in lines:
            msg = f"line {lineno}: duplicate key {key!r} (first set on line {lines[key]})"
            raise ConfigError(msg)
        values[key] = value.strip()
        lines[key] = lineno
    return values, lines


def _key_of(loc: tuple[int | str, ...]) -> list[str]:
    parts = [str(p) for p in loc]
    # discriminated unions put the system id into the location
    if len(parts) > 1 and parts[0] == "system" and parts[1] in _SYSTEM_IDS:
        del parts[1]
    return parts


def _line_of(parts: list[str], lines: Mapping[str, int]) -> int | None:
    parts = list(parts)
    while parts:
        key = ".".join(parts)
        if key in lines:
            return lines[key]
        parts.pop()
    return None


def _validate(flat: Mapping[str, str], lines: Mapping[str, int], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            key = _key_of(err["loc"])
            where = ".".join(key) or "(top level)"
            line = _line_of(key, lines)
            prefix = f"line {line}: " if line is not None else ""
            problems.append(f"{prefix}{where}: {err['msg']}")
        msg = f"invalid configuration in {source}:\n  " + "\n  ".join(problems)
        raise ConfigError(msg) from exc


def preset_values(name: str) -> dict[str, str]:
    """Flat key-value mapping of a shipped preset.

    Raises:
        ConfigError: Unknown preset name.
    """
    if name not in PRESETS:
        msg = f"unknown preset {name!r}; choose one of {', '.join(sorted(PRESETS))}"
        raise ConfigError(msg)
    return dict(PRESETS[name])


def load_config_text(
    text: str,
    *,
    preset: str | None = None,
    overrides: Mapping[str, str] | None = None,
    source: str = "<string>",
) -> RunConfig:
    """Validate run file text, optionally on top of a preset and under overrides."""
    values, lines = parse_config_text(text)
    name = values.pop("preset", None) or preset
    flat = preset_values(name) if name else {}
    flat.update(values)
    flat.update(overrides or {})
    return _validate(flat, lines, source)


def load_config(
    path: Path | None = None,
    *,
    preset: str | None = None,
    overrides: Mapping[str, str] | None = None,
) -> RunConfig:
    """Build a run configuration from a run file, a preset or both.

    Raises:
        ConfigError: Missing file, malformed line, unknown key or invalid value.
    """
    if path is None:
        if preset is None:
            msg = "either a config file or a preset is required"
            raise ConfigError(msg)
        return load_config_text("", preset=preset, overrides=overrides, source=f"preset {preset}")
    path = Path(path)
    if not path.is_file():
        msg = f"config file not found: {path}"
        raise ConfigError(msg)
    cfg = load_config_text(path.read_text(encoding="utf-8"), preset=preset, overrides=overrides, source=str(path))
    logger.debug("Loaded run configuration from %s", path)
    return cfg


def _flatten(prefix: str, value: Any, out: dict[str, str]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, child, out)
    elif isinstance(value, list):
        out[prefix] = ",".join(_scalar(v) for v in value)
    elif value is not None:
        out[prefix] = _scalar(value)


def _scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config_file(cfg: RunConfig) -> str:
    """Serialize a configuration to a run file that loads back to an equal configuration."""
    flat: dict[str, str] = {}
    _flatten("", cfg.model_dump(mode="json"), flat)
    body = "\n".join(f"{key} = {value}" for key, value in flat.items())
    return f"# chaoscope run configuration\n{body}\n"


def resolve_policy(spec: str, sys: DynamicalSystem, base_dir: Path | None = None) -> PolicyParams:
    """Turn a policy spec into parameters matching the system's dimensions.

    Raises:
        ConfigError: Unknown spec, missing weight file, malformed file or a
            dimension mismatch.
    """
    spec = spec.strip()
    if spec == "none":
        return no_action_policy(sys.state_dim, sys.action_dim)
    if spec.startswith("constant:"):
        try:
            action = [float(x) for x in spec.removeprefix("constant:").split(",")]
        except ValueError as exc:
            msg = f"policy {spec!r}: constant actions must be numbers"
            raise ConfigError(msg) from exc
        if len(action) != sys.action_dim:
            msg = f"policy {spec!r}: expected {sys.action_dim} action values for {sys.id}, got {len(action)}"
            raise ConfigError(msg)
        return constant_policy(sys.state_dim, action)

    path = Path(spec)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.is_file():
        msg = f"policy weight file not found: {path}"
        raise ConfigError(msg)
    params = load_weights(path)
    if params.obs_dim != sys.state_dim or params.action_dim != sys.action_dim:
        msg = (
            f"policy in {path} maps {params.obs_dim} -> {params.action_dim} but {sys.id} has "
            f"N={sys.state_dim}, M={sys.action_dim}"
        )
        raise ConfigError(msg)
    logger.info("Loaded %s policy with %d parameters from %s", params.kind, params.theta.size, path)
    return params
