"""Robustness evaluation, return landscapes and estimator quality evals."""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, ClassVar, Self

import numpy as np
from pydantic import BaseModel, Field, model_validator
from pydantic_evals import Case, Dataset
from pydantic_evals.evaluators import Evaluator, EvaluatorContext

from chaoscope.config import NoiseConfig, SpectrumConfig
from chaoscope.dynsys import DynamicalSystem, HenonMap, LogisticMap, Lorenz, Pointmass, Trajectory, rollout, sample_initial
from chaoscope.instrumentation import span
from chaoscope.lyapunov import StabilityClass, derive_seeds, spectrum_over_samples
from chaoscope.policy import PolicyParams, constant_policy, no_action_policy
from chaoscope.stats import MIN_BOOTSTRAP_VALUES, bootstrap_ci, iqm

logger = logging.getLogger(__name__)


# Observation-noise robustness -----------------------------------------------


def noisy_eval(
    sys: DynamicalSystem,
    policy: PolicyParams,
    noise: NoiseConfig,
    episodes: int,
    horizon: int,
    seed: int = 0,
    *,
    s0: Any = None,
    workers: int = 1,
) -> list[float]:
    """Undiscounted returns of `episodes` noisy rollouts.

    Episode i uses the i-th seed derived from `seed`, both for its initial
    state (unless `s0` fixes one for all episodes) and for its observation
    noise. Noise reaches the policy input only.
    """
    if horizon < 1:
        msg = f"horizon must be >= 1, got {horizon}"
        raise ValueError(msg)
    if episodes < 1:
        msg = f"episodes must be >= 1, got {episodes}"
        raise ValueError(msg)
    seeds = derive_seeds(seed, episodes)

    def run(episode_seed: int) -> float:
        start = sample_initial(sys, episode_seed) if s0 is None else s0
        return rollout(sys, policy, start, horizon, noise, episode_seed).total_reward

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, seeds))


class RobustnessEntry(BaseModel):
    """Returns at one noise level with their IQM and bootstrap interval."""

    sigma: float = Field(ge=0.0)
    returns: list[float]
    iqm: float
    ci_low: float
    ci_high: float
    n_episodes: int
    episode_length: int

    @model_validator(mode="after")
    def check_interval(self) -> Self:
        """Require ci_low <= ci_high."""
        if self.ci_low > self.ci_high:
            msg = f"interval [{self.ci_low}, {self.ci_high}] is inverted"
            raise ValueError(msg)
        return self


class RobustnessReport(BaseModel):
    """One entry per noise level, in sweep order."""

    CSV_HEADER: ClassVar[tuple[str, ...]] = ("sigma", "iqm", "ci_low", "ci_high", "n_episodes")

    policy: str = "policy"
    entries: list[RobustnessEntry]

    def csv_rows(self) -> list[list[str]]:
        """Rows `sigma,iqm,ci_low,ci_high,n_episodes`."""
        return [[repr(e.sigma), repr(e.iqm), repr(e.ci_low), repr(e.ci_high), str(e.n_episodes)] for e in self.entries]


def _entry(sigma: float, returns: list[float], horizon: int, level: float, resamples: int, seed: int) -> RobustnessEntry:
    centre = iqm(returns)
    if len(returns) >= MIN_BOOTSTRAP_VALUES:
        low, high = bootstrap_ci(returns, level, resamples, seed)
    else:
        low = high = centre
    if not low <= centre <= high:
        logger.warning("sigma=%g: bootstrap interval [%.6g, %.6g] excludes the IQM %.6g", sigma, low, high, centre)
    return RobustnessEntry(
        sigma=sigma,
        returns=returns,
        iqm=centre,
        ci_low=low,
        ci_high=high,
        n_episodes=len(returns),
        episode_length=horizon,
    )


def robustness_sweep(
    sys: DynamicalSystem,
    policy: PolicyParams,
    sigmas: Sequence[float],
    episodes: int,
    horizon: int,
    seed: int = 0,
    *,
    s0: Any = None,
    scale: Sequence[float] | None = None,
    workers: int = 1,
    resamples: int = 2000,
    level: float = 0.95,
    label: str = "policy",
) -> RobustnessReport:
    """Evaluate `policy` at every noise level in `sigmas`.

    All levels share the same episode seeds, so differences between rows come
    from the noise magnitude alone.
    """
    entries = []
    for sigma in sigmas:
        noise = NoiseConfig(sigma=sigma, seed=seed, scale=list(scale) if scale is not None else None)
        with span("noisy_eval", system=sys.id, sigma=sigma, episodes=episodes):
            returns = noisy_eval(sys, policy, noise, episodes, horizon, seed, s0=s0, workers=workers)
        entry = _entry(sigma, returns, horizon, level, resamples, seed)
        logger.info(
            "%s sigma=%g: IQM return %.4f [%.4f, %.4f]",
            label,
            sigma,
            entry.iqm,
            entry.ci_low,
            entry.ci_high,
        )
        entries.append(entry)
    return RobustnessReport(policy=label, entries=entries)


# Return landscape -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReturnLandscape:
    """Total reward as a function of the signed initial perturbation magnitude."""

    magnitudes: np.ndarray
    returns: np.ndarray
    direction: np.ndarray

    def best(self, count: int) -> np.ndarray:
        """Magnitudes of the `count` highest returns, best first."""
        return self.magnitudes[np.argsort(-self.returns, kind="stable")[:count]]

    def worst(self, count: int) -> np.ndarray:
        """Magnitudes of the `count` lowest returns, worst first."""
        return self.magnitudes[np.argsort(self.returns, kind="stable")[:count]]


def _unit(direction: Any, dim: int) -> np.ndarray:
    d = np.asarray(direction, dtype=float).reshape(-1)
    if d.shape != (dim,):
        msg = f"direction must have {dim} entries, got {d.size}"
        raise ValueError(msg)
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        msg = "direction must be non-zero"
        raise ValueError(msg)
    return d / norm


def return_landscape(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    direction: Any,
    magnitudes: Sequence[float],
    horizon: int,
    *,
    workers: int = 1,
) -> ReturnLandscape:
    """Noiseless return from s0 + m * direction for every magnitude m."""
    s0 = np.asarray(s0, dtype=float)
    unit = _unit(direction, sys.state_dim)
    mags = np.asarray(magnitudes, dtype=float)

    def run(m: float) -> float:
        return rollout(sys, policy, s0 + m * unit, horizon).total_reward

    with span("return_landscape", system=sys.id, points=len(mags)), ThreadPoolExecutor(max_workers=workers) as pool:
        returns = np.array(list(pool.map(run, mags)))
    spread = float(returns.max() - returns.min())
    logger.info("%s: returns over %d perturbations span %.6g", sys.id, len(mags), spread)
    return ReturnLandscape(mags, returns, unit)


def extreme_trajectories(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    landscape: ReturnLandscape,
    count: int,
    horizon: int,
) -> dict[str, list[tuple[float, Trajectory]]]:
    """Re-simulate the best and worst `count` perturbations of a landscape."""
    s0 = np.asarray(s0, dtype=float)
    return {
        label: [(float(m), rollout(sys, policy, s0 + m * landscape.direction, horizon)) for m in mags]
        for label, mags in (("best", landscape.best(count)), ("worst", landscape.worst(count)))
    }


# Estimator quality ------------------------------------------------------------


@dataclass
class EstimatorInput:
    """A closed loop and the estimator settings to run on it."""

    system: DynamicalSystem
    policy: PolicyParams
    spectrum: SpectrumConfig
    seed: int = 0


@dataclass
class EstimatorOutput:
    """Aggregated estimate."""

    exponents: list[float]
    mle: float
    sle: float
    stability: StabilityClass


@dataclass
class ExpectedExponents:
    """Reference values; None skips the corresponding check."""

    mle: float | None = None
    sle: float | None = None
    stability: StabilityClass | None = None
    tolerance: float = 0.02


def _within(actual: float, expected: float | None, tolerance: float) -> float:
    if expected is None:
        return 1.0
    return 1.0 if math.isfinite(actual) and abs(actual - expected) <= tolerance else 0.0


@dataclass
class MLEWithinTolerance(Evaluator[Any, Any]):
    """Evaluator that checks the maximal exponent against its reference value."""

    def evaluate(self, ctx: EvaluatorContext[Any, Any]) -> float:
        """Return 1.0 if the MLE is within tolerance, 0.0 otherwise."""
        if ctx.expected_output is None:
            return 0.0
        expected: ExpectedExponents = ctx.expected_output
        return _within(ctx.output.mle, expected.mle, expected.tolerance)


@dataclass
class SLEWithinTolerance(Evaluator[Any, Any]):
    """Evaluator that checks the exponent sum against its reference value."""

    scale: float = 1.0

    def evaluate(self, ctx: EvaluatorContext[Any, Any]) -> float:
        """Return 1.0 if the SLE is within `scale` times the tolerance."""
        if ctx.expected_output is None:
            return 0.0
        expected: ExpectedExponents = ctx.expected_output
        return _within(ctx.output.sle, expected.sle, self.scale * expected.tolerance)


@dataclass
class StabilityMatch(Evaluator[Any, Any]):
    """Evaluator that checks the stability class."""

    def evaluate(self, ctx: EvaluatorContext[Any, Any]) -> float:
        """Return 1.0 if the class matches or none is expected."""
        if ctx.expected_output is None:
            return 0.0
        expected: ExpectedExponents = ctx.expected_output
        if expected.stability is None:
            return 1.0
        return 1.0 if ctx.output.stability == expected.stability else 0.0


def estimate(inputs: EstimatorInput) -> EstimatorOutput:
    """Run the sample-aggregated spectrum estimator on one input."""
    result = spectrum_over_samples(inputs.system, inputs.policy, inputs.spectrum, inputs.seed)
    return EstimatorOutput(
        exponents=result.exponents.tolist(),
        mle=result.mle,
        sle=result.sle,
        stability=result.stability(inputs.spectrum.tau0),
    )


async def estimate_task(inputs: EstimatorInput) -> EstimatorOutput:
    """Task adapter for `Dataset.evaluate`."""
    return estimate(inputs)


def create_eval_dataset() -> Dataset[EstimatorInput, EstimatorOutput]:
    """Create the estimator quality dataset of closed loops with known exponents.

    Returns:
        Dataset with one case per reference system.
    """
    lorenz = Lorenz()
    cases = [
        Case(
            name="logistic_full_growth",
            inputs=EstimatorInput(
                system=LogisticMap(),
                policy=constant_policy(1, 4.0),
                spectrum=SpectrumConfig.from_windows(2000, 10, samples=5, epsilon=1e-8),
            ),
            expected_output=ExpectedExponents(mle=math.log(2.0), stability=StabilityClass.CHAOTIC, tolerance=0.03),
            metadata={"difficulty": "easy", "type": "map"},
        ),
        Case(
            name="henon_classic",
            inputs=EstimatorInput(
                system=HenonMap(),
                policy=no_action_policy(2, 1),
                spectrum=SpectrumConfig.from_windows(5000, 1, samples=5),
            ),
            expected_output=ExpectedExponents(
                mle=0.419,
                sle=math.log(0.3),
                stability=StabilityClass.CHAOTIC,
                tolerance=0.02,
            ),
            metadata={"difficulty": "medium", "type": "map"},
        ),
        Case(
            name="lorenz_trace",
            inputs=EstimatorInput(
                system=lorenz,
                policy=no_action_policy(3, 1),
                spectrum=SpectrumConfig.from_windows(2000, 10, samples=3, transient=500),
            ),
            expected_output=ExpectedExponents(
                mle=0.906,
                sle=-(lorenz.sigma + 1.0 + lorenz.beta),
                stability=StabilityClass.CHAOTIC,
                tolerance=0.1,
            ),
            metadata={"difficulty": "hard", "type": "flow"},
        ),
        Case(
            name="frictionless_pointmass",
            inputs=EstimatorInput(
                system=Pointmass(damping=0.0),
                policy=no_action_policy(4, 2),
                spectrum=SpectrumConfig.from_windows(100, 10, samples=3),
            ),
            expected_output=ExpectedExponents(mle=0.0, sle=0.0, stability=StabilityClass.STABLE, tolerance=0.01),
            metadata={"difficulty": "easy", "type": "flow"},
        ),
    ]

    return Dataset(
        cases=cases,
        evaluators=[
            MLEWithinTolerance(),
            SLEWithinTolerance(scale=3.0),
            StabilityMatch(),
        ],
    )
