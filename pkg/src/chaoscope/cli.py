"""Command-line interface.

    chaoscope <command> (--config PATH | --preset NAME) [--seed N] [--out DIR] [--set KEY=VALUE ...]

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

import argparse
import logging
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from chaoscope.config import Settings, SpectrumConfig, get_settings
from chaoscope.dynsys import DynamicalSystem, sample_initial
from chaoscope.errors import ChaoscopeError, ConfigError, NumericalError, PolicyError
from chaoscope.evals import extreme_trajectories, return_landscape, robustness_sweep
from chaoscope.instrumentation import configure_instrumentation
from chaoscope.lyapunov import (
    benettin_spectrum,
    derive_seeds,
    divergence_curve,
    reward_mle_samples,
    running_exponents,
    spectrum_over_samples,
)
from chaoscope.mleg import train
from chaoscope.policy import PolicyParams, dumps_weights
from chaoscope.reports import ReportBundle, file_label
from chaoscope.runconfig import PRESETS, RunConfig, load_config, resolve_policy
from chaoscope.stats import MIN_BOOTSTRAP_VALUES, bootstrap_ci, iqm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2

SPECTRUM_SUMMARY_HEADER = ("system", "policy", "seed", "mle", "sle", "class")
AGGREGATE_SEED = "aggregate"


def setup_logging(settings: Settings, *, verbose: bool = False) -> None:
    """Configure logging for the application."""
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.log_file is not None:
        settings.log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(settings.log_file, encoding="utf-8"))

    logging.basicConfig(
        level=logging.DEBUG if verbose else settings.log_level.upper(),
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
    )
    # Reduce noise from matplotlib
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


@dataclass
class RunContext:
    """Resolved inputs shared by every command."""

    cfg: RunConfig
    base_dir: Path
    workers: int
    bundle: ReportBundle

    @property
    def system(self) -> DynamicalSystem:
        """The configured system."""
        return self.cfg.system

    @property
    def echo(self) -> dict[str, Any]:
        """The full resolved configuration."""
        return self.cfg.model_dump(mode="json")

    def policy(self, spec: str | None = None) -> PolicyParams:
        """Resolve the configured policy (or `spec`) for the system."""
        return resolve_policy(spec or self.cfg.policy, self.system, self.base_dir)

    def initial_state(self) -> np.ndarray:
        """Configured start state, or one drawn from the initial box."""
        if self.cfg.initial_state is not None:
            s0 = np.asarray(self.cfg.initial_state, dtype=float)
            if s0.shape != (self.system.state_dim,):
                msg = f"initial_state must have {self.system.state_dim} entries, got {s0.size}"
                raise ConfigError(msg)
            return s0
        return sample_initial(self.system, derive_seeds(self.cfg.seed, 1)[0])


def cmd_spectrum(ctx: RunContext) -> ReportBundle:
    """Estimate the spectrum over sampled initial states and classify it.

    summary.csv holds one row per surviving sample and a final `aggregate`
    row with the IQM exponents.
    """
    cfg, sys = ctx.cfg, ctx.system
    tau0 = cfg.spectrum.tau0
    result = spectrum_over_samples(sys, ctx.policy(), cfg.spectrum, cfg.seed, workers=ctx.workers)
    stability = result.stability(tau0)
    ctx.bundle.json(
        "spectrum",
        {
            "config": ctx.echo,
            "result": result.to_dict(),
            "stability": stability.value,
            "excluded_count": len(result.excluded),
        },
    )
    rows: list[list[Any]] = [
        [sys.id, cfg.policy, seed, sp.mle, sp.sle, sp.stability(tau0).value]
        for seed, sp in zip(result.seeds, result.spectra, strict=True)
    ]
    rows.append([sys.id, cfg.policy, AGGREGATE_SEED, result.mle, result.sle, stability.value])
    ctx.bundle.csv("summary", SPECTRUM_SUMMARY_HEADER, rows)
    n = len(result.exponents)
    running = running_exponents(result.spectra[0])
    ctx.bundle.plot(
        "convergence",
        "window",
        range(1, len(running) + 1),
        {f"lambda_{i + 1}": running[:, i] for i in range(n)},
        title=f"{sys.id}: running exponent estimates",
        ylabel="exponent",
    )
    logger.info("%s: %s (MLE %.4f, SLE %.4f)", sys.id, stability.value, result.mle, result.sle)
    return ctx.bundle


def cmd_reward_mle(ctx: RunContext) -> ReportBundle:
    """Estimate the reward MLE per sample next to the state MLE."""
    cfg, sys = ctx.cfg, ctx.system
    policy = ctx.policy()
    samples = reward_mle_samples(sys, policy, cfg.spectrum, cfg.seed, workers=ctx.workers)
    state = spectrum_over_samples(sys, policy, cfg.spectrum, cfg.seed, seeds=samples.seeds, workers=ctx.workers)
    finite = samples.finite
    centre = iqm(finite) if finite.size else float("-inf")
    low, high = bootstrap_ci(finite, seed=cfg.seed) if finite.size >= MIN_BOOTSTRAP_VALUES else (None, None)
    ctx.bundle.csv(
        "reward_mle",
        ["seed", "reward_mle", "measurable"],
        [[s, v, str(np.isfinite(v)).lower()] for s, v in zip(samples.seeds, samples.values, strict=True)],
    )
    ctx.bundle.csv(
        "summary",
        ["system", "policy", "reward_mle", "reward_mle_iqm", "ci_low", "ci_high", "measurable", "samples", "state_mle"],
        [[sys.id, cfg.policy, samples.mean, centre, low, high, finite.size, len(samples.values), state.mle]],
    )
    ctx.bundle.json(
        "reward_mle",
        {
            "config": ctx.echo,
            "seeds": samples.seeds,
            "values": samples.values,
            "mean": samples.mean,
            "iqm": centre,
            "ci": [low, high] if low is not None else None,
            "state_mle": state.mle,
        },
    )
    logger.info("%s: reward MLE %.4f, state MLE %.4f", sys.id, samples.mean, state.mle)
    return ctx.bundle


def cmd_diverge(ctx: RunContext) -> ReportBundle:
    """Record state and reward gaps of a perturbed twin trajectory."""
    cfg, sys = ctx.cfg, ctx.system
    s0 = ctx.initial_state()
    curve = divergence_curve(sys, ctx.policy(), s0, cfg.diverge.epsilon, cfg.diverge.steps, cfg.seed)
    slope = curve.log_slope(cfg.diverge.fit_until)
    positive = bool(np.any(curve.state_gap > 0))
    ctx.bundle.plot(
        "divergence",
        "t",
        range(len(curve.state_gap)),
        {"state_gap": curve.state_gap, "reward_gap": curve.reward_gap},
        title=f"{sys.id}: twin trajectories, log-slope {slope:.4f}",
        ylabel="gap",
        logy=positive,
    )
    ctx.bundle.json(
        "divergence",
        {
            "config": ctx.echo,
            "initial_state": s0,
            "log_slope": slope,
            "truncated": curve.truncated,
            "steps": curve.steps,
        },
    )
    logger.info("%s: divergence log-slope %.4f over %d steps", sys.id, slope, curve.steps)
    return ctx.bundle


def cmd_robustness(ctx: RunContext) -> ReportBundle:
    """Sweep observation noise for the configured policy and any comparison policies."""
    cfg, sys = ctx.cfg, ctx.system
    sweep = cfg.sweep
    reports = [
        robustness_sweep(
            sys,
            ctx.policy(spec),
            sweep.sigmas,
            sweep.episodes,
            sweep.horizon,
            cfg.seed,
            s0=cfg.initial_state,
            scale=cfg.noise.scale,
            workers=ctx.workers,
            resamples=sweep.resamples,
            level=sweep.level,
            label=spec,
        )
        for spec in [cfg.policy, *cfg.compare]
    ]
    used = {"robustness_curve"}
    for i, report in enumerate(reports):
        name = "robustness" if i == 0 else f"robustness_{file_label(report.policy)}"
        if name in used:
            name = f"{name}_{i}"
        used.add(name)
        ctx.bundle.csv(name, report.CSV_HEADER, report.csv_rows())
    ctx.bundle.plot(
        "robustness_curve",
        "sigma",
        sweep.sigmas,
        {r.policy: [e.iqm for e in r.entries] for r in reports},
        title=f"{sys.id}: IQM return under observation noise",
        ylabel="IQM return",
    )
    ctx.bundle.json("robustness", {"config": ctx.echo, "reports": [r.model_dump(mode="json") for r in reports]})
    return ctx.bundle


def cmd_train(ctx: RunContext) -> ReportBundle:
    """Train a policy and write its weights and history."""
    cfg, sys = ctx.cfg, ctx.system
    result = train(sys, cfg.trainer.model_copy(update={"seed": cfg.seed}))
    ctx.bundle.text("policy.weights", dumps_weights(result.policy))
    ctx.bundle.text("value.weights", dumps_weights(result.value))
    ctx.bundle.csv(
        "history",
        ["update", "return_iqm", "reg_loss", "mle"],
        [[r.update, r.return_iqm, r.reg_loss, r.mle] for r in result.history],
    )
    logged = [r for r in result.history if r.mle is not None]
    ctx.bundle.plot(
        "mle_curve",
        "update",
        [r.update for r in logged],
        {"mle": [r.mle for r in logged]},
        title=f"{sys.id}: MLE of the mean policy during training (beta={cfg.trainer.beta:g})",
        ylabel="MLE",
    )
    last = result.history[-1]
    ctx.bundle.json(
        "training",
        {
            "config": ctx.echo,
            "final_mle": last.mle,
            "final_return_iqm": last.return_iqm,
            "clipped_updates": result.clipped_updates,
        },
    )
    logger.info("Trained %d updates: return IQM %.4f, MLE %s", last.update, last.return_iqm, last.mle)
    return ctx.bundle


def _windows(base: SpectrumConfig, iterations: int, samples: int) -> SpectrumConfig:
    fields = base.model_dump(exclude={"timesteps", "iterations", "period", "samples"})
    return SpectrumConfig.from_windows(iterations, base.period, samples=samples, **fields)


def cmd_ablate(ctx: RunContext) -> ReportBundle:
    """Sweep the window count and the sample count of the spectrum estimator."""
    cfg, sys = ctx.cfg, ctx.system
    policy = ctx.policy()
    ablation = cfg.ablation
    repeats = derive_seeds(cfg.seed, ablation.repeats)
    rows: list[list[Any]] = []

    longest = None
    for k in ablation.iterations:
        est = _windows(cfg.spectrum, k, 1)
        for seed in repeats:
            sp = benettin_spectrum(sys, policy, sample_initial(sys, seed), est, seed)
            rows.append(["iterations", k, seed, sp.mle, None, None])
            if k == max(ablation.iterations) and longest is None:
                longest = sp
    for n in ablation.samples:
        est = _windows(cfg.spectrum, cfg.spectrum.iterations, n)
        for seed in repeats:
            res = spectrum_over_samples(sys, policy, est, seed, workers=ctx.workers)
            low, high = res.mle_ci or (None, None)
            rows.append(["samples", n, seed, res.mle, low, high])

    ctx.bundle.csv("ablation", ["sweep", "setting", "seed", "mle", "ci_low", "ci_high"], rows)
    if longest is not None:
        running = running_exponents(longest)
        ctx.bundle.plot(
            "convergence",
            "window",
            range(1, len(running) + 1),
            {"lambda_1": running[:, 0]},
            title=f"{sys.id}: running MLE over {len(running)} windows",
            ylabel="MLE",
        )
    ctx.bundle.json("ablation", {"config": ctx.echo, "rows": rows})
    return ctx.bundle


def cmd_landscape(ctx: RunContext) -> ReportBundle:
    """Total reward under initial perturbations along a fixed random direction."""
    cfg, sys = ctx.cfg, ctx.system
    policy = ctx.policy()
    settings = cfg.landscape
    s0 = ctx.initial_state()
    direction = np.random.default_rng(derive_seeds(cfg.seed, 2)[1]).standard_normal(sys.state_dim)
    magnitudes = np.linspace(-settings.max_magnitude, settings.max_magnitude, settings.count)
    landscape = return_landscape(sys, policy, s0, direction, magnitudes, settings.horizon, workers=ctx.workers)
    ctx.bundle.plot(
        "landscape",
        "magnitude",
        landscape.magnitudes,
        {"return": landscape.returns},
        title=f"{sys.id}: return under initial perturbations",
        ylabel="total reward",
    )
    extremes = extreme_trajectories(sys, policy, s0, landscape, settings.extremes, settings.horizon)
    for label, runs in extremes.items():
        for rank, (_, traj) in enumerate(runs, start=1):
            ctx.bundle.csv(f"{label}_{rank}", traj.csv_header(), traj.csv_rows())
    ctx.bundle.json(
        "landscape",
        {
            "config": ctx.echo,
            "initial_state": s0,
            "direction": landscape.direction,
            "extremes": {label: [{"magnitude": m, "return": t.total_reward} for m, t in runs] for label, runs in extremes.items()},
        },
    )
    return ctx.bundle


COMMANDS: dict[str, Callable[[RunContext], ReportBundle]] = {
    "spectrum": cmd_spectrum,
    "reward-mle": cmd_reward_mle,
    "diverge": cmd_diverge,
    "robustness": cmd_robustness,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "landscape": cmd_landscape,
}


def _override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        msg = f"expected KEY=VALUE, got {text!r}"
        raise argparse.ArgumentTypeError(msg)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = argparse.ArgumentParser(prog="chaoscope", description="Lyapunov analysis of closed-loop control systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip())
        p.add_argument("--config", type=Path, help="run file with key = value lines")
        p.add_argument("--preset", choices=sorted(PRESETS), help="start from a shipped preset")
        p.add_argument("--seed", type=int, help="master seed (overrides the run file)")
        p.add_argument("--out", type=Path, help="output directory (default: CHAOSCOPE_OUT_DIR)")
        p.add_argument("--workers", type=int, help="threads for independent samples and episodes")
        p.add_argument(
            "--set",
            dest="overrides",
            type=_override,
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one configuration key",
        )
        p.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    overrides["command"] = args.command
    return load_config(args.config, preset=args.preset, overrides=overrides)


def run(args: argparse.Namespace, settings: Settings) -> int:
    """Execute a parsed command and map failures to exit codes."""
    try:
        cfg = _resolve(args)
        out_dir = cfg.out or settings.out_dir
        base_dir = args.config.parent if args.config is not None else Path.cwd()
        ctx = RunContext(cfg, base_dir, cfg.workers or settings.workers, ReportBundle(out_dir))
        bundle = COMMANDS[args.command](ctx)
    except (ConfigError, PolicyError) as exc:
        logger.error("Configuration error: %s", exc)  # noqa: TRY400
        logger.debug("Traceback", exc_info=True)
        return EXIT_CONFIG
    except NumericalError as exc:
        logger.error("Numerical failure: %s", exc)  # noqa: TRY400
        logger.debug("Traceback", exc_info=True)
        return EXIT_NUMERICAL
    except ChaoscopeError as exc:
        logger.error("%s", exc)  # noqa: TRY400
        return EXIT_NUMERICAL
    for path in bundle.files:
        print(path)
    logger.info("Wrote %d files to %s", len(bundle.files), out_dir)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line interface."""
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = get_settings()
    setup_logging(settings, verbose=args.verbose)

    # Set OTEL endpoint from settings (must be set before logfire.configure)
    if settings.otel_enabled:
        os.environ.setdefault("OTEL_EXPORTER_OTLP_ENDPOINT", settings.otel_exporter_endpoint)
    configure_instrumentation(settings)

    return run(args, settings)
