"""Lyapunov spectrum estimation and stability classification for closed loops.

The primary estimator follows one nominal trajectory plus one companion per
state dimension, offset by `epsilon` along orthonormal directions. Every
`period` steps the companion offsets are Gram-Schmidt orthonormalized, their
log growth recorded and the offsets reset to length `epsilon`. Exponents are
reported in nats per step for maps and per unit time for flows.

A tangent-space estimator that multiplies closed-loop Jacobians and
re-orthonormalizes them with QR serves as an independent oracle.

Stochastic policies are always evaluated at their mean action here.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from chaoscope.config import SpectrumConfig
from chaoscope.dynsys import ClosedLoop, DynamicalSystem, JacobianMethod, closed_loop_jacobian, sample_initial
from chaoscope.errors import DegenerateBasisError, NonFiniteStateError, NumericalError
from chaoscope.instrumentation import span
from chaoscope.policy import PolicyParams
from chaoscope.stats import MIN_BOOTSTRAP_VALUES, bootstrap_ci, iqm

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-300
REWARD_GAP_DELTA = 1e-12
REWARD_GAP_FLOOR = 1e-9
SATURATION_FRACTION = 0.1
MIN_FIT_POINTS = 2


class StabilityClass(str, Enum):
    """Sign regimes of (MLE, SLE)."""

    STABLE = "Stable"
    CHAOTIC = "Chaotic"
    UNSTABLE = "Unstable"


def classify(mle: float, sle: float, tau0: float) -> StabilityClass:
    """Classify a spectrum; `mle == tau0` counts as Stable."""
    if mle <= tau0:
        return StabilityClass.STABLE
    if sle < 0:
        return StabilityClass.CHAOTIC
    return StabilityClass.UNSTABLE


@dataclass(frozen=True, eq=False)
class LyapunovSpectrum:
    """Exponents sorted descending plus per-window log growth factors."""

    exponents: np.ndarray
    log_growth: np.ndarray
    period: int
    dt: float = 1.0
    samples: int = 1

    @property
    def mle(self) -> float:
        """Maximal exponent."""
        return float(self.exponents[0])

    @property
    def sle(self) -> float:
        """Sum of all exponents."""
        return float(np.sum(self.exponents))

    def stability(self, tau0: float) -> StabilityClass:
        """Classify using per-step exponents (flows are scaled back by dt)."""
        return classify(self.mle * self.dt, self.sle * self.dt, tau0)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation including per-window diagnostics."""
        return {
            "exponents": self.exponents.tolist(),
            "mle": self.mle,
            "sle": self.sle,
            "dt": self.dt,
            "period": self.period,
            "samples": self.samples,
            "log_growth": self.log_growth.tolist(),
        }


def gram_schmidt(vectors: Any) -> tuple[np.ndarray, np.ndarray]:
    """Classical Gram-Schmidt with one re-orthogonalization pass.

    Args:
        vectors: Rows to orthonormalize, in order.

    Returns:
        The orthonormal rows and the norm of each row just before normalization.

    Raises:
        DegenerateBasisError: A row has (numerically) no component outside the
            span of the previous rows.
    """
    v = np.array(vectors, dtype=float, ndmin=2)
    q = np.zeros_like(v)
    norms = np.empty(len(v))
    for i in range(len(v)):
        w = v[i].copy()
        for _ in range(2):
            w -= q[:i].T @ (q[:i] @ w)
        norm = float(np.linalg.norm(w))
        if not np.isfinite(norm) or norm < DEGENERATE_NORM:
            raise DegenerateBasisError
        q[i] = w / norm
        norms[i] = norm
    return q, norms


def _initial_basis(dim: int, orientation: str, seed: int) -> np.ndarray:
    if orientation == "identity":
        return np.eye(dim)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, dim)))
    return q.T


def _warm_up(loop: ClosedLoop, z: np.ndarray, steps: int) -> np.ndarray:
    for t in range(steps):
        z = np.asarray(loop.step(z), dtype=float)
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(step=t + 1)
    return z


def benettin_spectrum(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    cfg: SpectrumConfig,
    seed: int = 0,
    *,
    h0: Any = None,
) -> LyapunovSpectrum:
    """Full spectrum from companion trajectories re-orthonormalized every `cfg.period` steps.

    Raises:
        NonFiniteStateError: Any trajectory stopped being finite (with the step index).
        DegenerateBasisError: The companion offsets collapsed.
    """
    loop = ClosedLoop(sys, policy)
    z0 = _warm_up(loop, loop.augment(s0, h0), cfg.transient)
    dim = loop.dim
    eps = cfg.epsilon
    basis = _initial_basis(dim, cfg.orientation, seed)
    bundle = np.vstack([z0, z0 + eps * basis])
    log_growth = np.empty((cfg.iterations, dim))

    with span("benettin_spectrum", system=sys.id, iterations=cfg.iterations, period=cfg.period):
        for k in range(cfg.iterations):
            for t in range(cfg.period):
                bundle = np.asarray(loop.step(bundle), dtype=float)
                if not np.all(np.isfinite(bundle)):
                    raise NonFiniteStateError(step=cfg.transient + k * cfg.period + t + 1)
            q, norms = gram_schmidt((bundle[1:] - bundle[0]) / eps)
            log_growth[k] = np.log(norms)
            bundle[1:] = bundle[0] + eps * q
            logger.debug("window %d: log growth %s", k, log_growth[k])

    per_step = log_growth.sum(axis=0) / (cfg.iterations * cfg.period)
    exponents = np.sort(per_step / sys.step_size)[::-1]
    return LyapunovSpectrum(exponents, log_growth, cfg.period, dt=sys.step_size)


def tangent_spectrum(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    cfg: SpectrumConfig,
    seed: int = 0,
    *,
    h0: Any = None,
    method: JacobianMethod | None = None,
) -> LyapunovSpectrum:
    """Spectrum from products of closed-loop Jacobians with periodic QR.

    Uses the analytic Jacobian for memoryless policies and reverse-mode
    autodiff for recurrent ones unless `method` says otherwise.
    """
    loop = ClosedLoop(sys, policy)
    method = method or ("autodiff" if policy.recurrent else "analytic")
    z = _warm_up(loop, loop.augment(s0, h0), cfg.transient)
    frame = _initial_basis(loop.dim, cfg.orientation, seed).T
    log_growth = np.empty((cfg.iterations, loop.dim))

    with span("tangent_spectrum", system=sys.id, iterations=cfg.iterations):
        for k in range(cfg.iterations):
            for t in range(cfg.period):
                s, h = loop.split(z)
                frame = closed_loop_jacobian(sys, policy, s, h, method=method) @ frame
                z = np.asarray(loop.step(z), dtype=float)
                if not np.all(np.isfinite(z)):
                    raise NonFiniteStateError(step=cfg.transient + k * cfg.period + t + 1)
            frame, r = np.linalg.qr(frame)
            log_growth[k] = np.log(np.abs(np.diagonal(r)))

    per_step = log_growth.sum(axis=0) / (cfg.iterations * cfg.period)
    exponents = np.sort(per_step / sys.step_size)[::-1]
    return LyapunovSpectrum(exponents, log_growth, cfg.period, dt=sys.step_size)


def running_exponents(spectrum: LyapunovSpectrum) -> np.ndarray:
    """Cumulative exponent estimates after each window, shape (K, N), rows sorted descending."""
    windows = np.arange(1, len(spectrum.log_growth) + 1)[:, None]
    running = np.cumsum(spectrum.log_growth, axis=0) / (windows * spectrum.period * spectrum.dt)
    return -np.sort(-running, axis=1)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent per-sample seeds that depend only on the master seed and the index."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True, eq=False)
class SampleSpectra:
    """Per-sample spectra with IQM aggregates and bootstrap intervals.

    Intervals are None when fewer than two samples survive.
    """

    spectra: list[LyapunovSpectrum]
    seeds: list[int]
    excluded: list[tuple[int, str]]
    exponents: np.ndarray
    mle: float
    sle: float
    mle_ci: tuple[float, float] | None
    sle_ci: tuple[float, float] | None
    dt: float = 1.0

    def stability(self, tau0: float) -> StabilityClass:
        """Classify the aggregate spectrum in per-step units."""
        return classify(self.mle * self.dt, self.sle * self.dt, tau0)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "exponents": self.exponents.tolist(),
            "mle": self.mle,
            "sle": self.sle,
            "mle_ci": list(self.mle_ci) if self.mle_ci else None,
            "sle_ci": list(self.sle_ci) if self.sle_ci else None,
            "dt": self.dt,
            "seeds": self.seeds,
            "excluded": [{"seed": s, "reason": r} for s, r in self.excluded],
            "samples": [sp.to_dict() for sp in self.spectra],
        }


def spectrum_over_samples(
    sys: DynamicalSystem,
    policy: PolicyParams,
    cfg: SpectrumConfig,
    seed: int = 0,
    *,
    seeds: Sequence[int] | None = None,
    initial_states: Sequence[Any] | None = None,
    workers: int = 1,
    resamples: int = 2000,
    level: float = 0.95,
) -> SampleSpectra:
    """Estimate spectra from `cfg.samples` initial states and aggregate them.

    Each sample draws its initial state (unless `initial_states` are given)
    and its perturbation orientation from its own derived seed, so thread
    count never changes results. Diverging samples are excluded with a
    warning rather than failing the whole estimate.

    Raises:
        NumericalError: Every sample failed.
    """
    seeds = list(seeds) if seeds is not None else derive_seeds(seed, cfg.samples)
    starts = list(initial_states) if initial_states is not None else [sample_initial(sys, s) for s in seeds]
    if len(starts) != len(seeds):
        msg = f"got {len(starts)} initial states for {len(seeds)} seeds"
        raise ValueError(msg)

    def run(i: int) -> LyapunovSpectrum | NumericalError:
        try:
            return benettin_spectrum(sys, policy, starts[i], cfg, seeds[i])
        except NumericalError as exc:
            return exc

    with span("spectrum_over_samples", system=sys.id, samples=len(seeds)), ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, range(len(seeds))))

    spectra: list[LyapunovSpectrum] = []
    kept: list[int] = []
    excluded: list[tuple[int, str]] = []
    for s, res in zip(seeds, results, strict=True):
        if isinstance(res, NumericalError):
            logger.warning("Excluding sample with seed %d: %s", s, res)
            excluded.append((s, str(res)))
        else:
            spectra.append(res)
            kept.append(s)
    if not spectra:
        msg = f"all {len(seeds)} samples failed; first error: {excluded[0][1]}"
        raise NumericalError(msg)

    table = np.stack([sp.exponents for sp in spectra])
    mles = table[:, 0]
    sles = table.sum(axis=1)
    exponents = np.array([iqm(col) for col in table.T])
    enough = len(spectra) >= MIN_BOOTSTRAP_VALUES
    result = SampleSpectra(
        spectra=spectra,
        seeds=kept,
        excluded=excluded,
        exponents=exponents,
        mle=iqm(mles),
        sle=iqm(sles),
        mle_ci=bootstrap_ci(mles, level, resamples, seed) if enough else None,
        sle_ci=bootstrap_ci(sles, level, resamples, seed) if enough else None,
        dt=sys.step_size,
    )
    logger.info(
        "%s: MLE %.4f, SLE %.4f over %d samples (%d excluded)",
        sys.id,
        result.mle,
        result.sle,
        len(spectra),
        len(excluded),
    )
    return result


# Reward-space and divergence diagnostics ------------------------------------


def _direction(dim: int, orientation: str, seed: int) -> np.ndarray:
    if orientation == "identity":
        return np.ones(dim) / np.sqrt(dim)
    u = np.random.default_rng(seed).standard_normal(dim)
    return u / np.linalg.norm(u)


@dataclass(frozen=True, eq=False)
class DivergenceCurve:
    """Raw twin-trajectory gaps; `truncated` marks a blow-up before `steps`."""

    state_gap: np.ndarray
    reward_gap: np.ndarray
    truncated: bool
    dt: float = 1.0

    @property
    def steps(self) -> int:
        """Transitions actually simulated."""
        return len(self.reward_gap)

    def log_slope(self, fit_until: float) -> float:
        """Least-squares slope of ln(state gap) over the window before the gap exceeds `fit_until`.

        Returns NaN when fewer than two positive gaps fall in the window.
        """
        gap = self.state_gap
        over = np.flatnonzero(gap > fit_until)
        end = int(over[0]) if over.size else len(gap)
        t = np.arange(end)
        mask = gap[:end] > 0
        if mask.sum() < MIN_FIT_POINTS:
            return float("nan")
        slope = np.polyfit(t[mask], np.log(gap[:end][mask]), 1)[0]
        return float(slope / self.dt)


def _twin_rewards(
    sys: DynamicalSystem,
    loop: ClosedLoop,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    s, _ = loop.split(z)
    _, a, _ = loop.actions(z)
    return np.asarray(sys.evaluate_reward(s, a), dtype=float), np.asarray(loop.step(z), dtype=float)


def divergence_curve(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    epsilon: float,
    steps: int,
    seed: int = 0,
    *,
    orientation: str = "random",
    h0: Any = None,
) -> DivergenceCurve:
    """Gaps |s_t - s'_t| and |r_t - r'_t| between a trajectory and a twin offset by `epsilon`.

    No renormalization is applied. A non-finite state ends the curve early
    and sets `truncated`.
    """
    if epsilon < 0:
        msg = f"epsilon must be >= 0, got {epsilon}"
        raise ValueError(msg)
    loop = ClosedLoop(sys, policy)
    n = sys.state_dim
    z = loop.augment(s0, h0)
    offset = np.zeros(loop.dim)
    offset[:n] = epsilon * _direction(n, orientation, seed)
    pair = np.vstack([z, z + offset])
    state_gap = [float(np.linalg.norm(pair[0, :n] - pair[1, :n]))]
    reward_gap: list[float] = []
    truncated = False
    for t in range(steps):
        rewards, nxt = _twin_rewards(sys, loop, pair)
        if not np.all(np.isfinite(nxt)):
            logger.warning("Divergence curve truncated at step %d: non-finite state", t + 1)
            truncated = True
            break
        reward_gap.append(float(abs(rewards[0] - rewards[1])))
        pair = nxt
        state_gap.append(float(np.linalg.norm(pair[0, :n] - pair[1, :n])))
    return DivergenceCurve(np.array(state_gap), np.array(reward_gap), truncated, dt=sys.step_size)


def _reward_log_slope(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    cfg: SpectrumConfig,
    seed: int,
    orientation: str,
) -> float:
    curve = divergence_curve(sys, policy, s0, cfg.epsilon, cfg.timesteps, seed, orientation=orientation)
    if curve.truncated:
        raise NonFiniteStateError(step=curve.steps + 1)
    r_min, r_max = sys.reward_range
    gap = curve.reward_gap
    over = np.flatnonzero(gap > SATURATION_FRACTION * (r_max - r_min))
    end = int(over[0]) if over.size else len(gap)
    t = np.arange(end)
    mask = gap[:end] > REWARD_GAP_FLOOR
    if mask.sum() < MIN_FIT_POINTS:
        return float("-inf")
    slope = np.polyfit(t[mask], np.log(gap[:end][mask] + REWARD_GAP_DELTA), 1)[0]
    return float(slope / sys.step_size)


@dataclass(frozen=True)
class RewardMLESamples:
    """Per-initial-state reward MLEs; `-inf` marks no measurable divergence."""

    seeds: list[int]
    values: list[float]

    @property
    def finite(self) -> np.ndarray:
        """Estimates with measurable divergence."""
        v = np.asarray(self.values, dtype=float)
        return v[np.isfinite(v)]

    @property
    def mean(self) -> float:
        """Average of the finite estimates, or `-inf` when there are none."""
        f = self.finite
        return float(f.mean()) if f.size else float("-inf")


def reward_mle_samples(
    sys: DynamicalSystem,
    policy: PolicyParams,
    cfg: SpectrumConfig,
    seed: int = 0,
    *,
    seeds: Sequence[int] | None = None,
    s0: Any = None,
    workers: int = 1,
) -> RewardMLESamples:
    """Reward MLE from each of `cfg.samples` derived initial states.

    With `s0` every sample starts there instead and differs only in the
    direction of its twin, which is then always drawn at random from the
    sample seed.
    """
    seeds = list(seeds) if seeds is not None else derive_seeds(seed, cfg.samples)
    orientation = cfg.orientation if s0 is None else "random"

    def run(s: int) -> float:
        start = sample_initial(sys, s) if s0 is None else s0
        return _reward_log_slope(sys, policy, start, cfg, s, orientation)

    with span("reward_mle", system=sys.id, samples=len(seeds)), ThreadPoolExecutor(max_workers=workers) as pool:
        values = list(pool.map(run, seeds))
    result = RewardMLESamples(seeds, values)
    if result.finite.size < len(values):
        logger.warning(
            "%s: no measurable reward divergence for %d of %d samples",
            sys.id,
            len(values) - result.finite.size,
            len(values),
        )
    return result


def reward_mle(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    cfg: SpectrumConfig,
    seed: int = 0,
) -> float:
    """Slope of ln(|r_t - r'_t| + 1e-12) over the pre-saturation window, averaged over samples.

    The window ends when the reward gap first exceeds 10% of the declared
    reward range; gaps at or below 1e-9 are left out of the fit. The
    estimate is the mean over `cfg.samples` twin pairs: from derived initial
    states when `s0` is None, otherwise all from `s0` with their own random
    twin directions.

    Returns:
        The exponent (per unit time for flows), or `-inf` when the reward gap
        never becomes measurable.
    """
    value = reward_mle_samples(sys, policy, cfg, seed, s0=s0).mean
    if value == float("-inf"):
        logger.warning("%s: no measurable divergence of the reward", sys.id)
    return value
