"""Policy training with a maximal-Lyapunov-exponent regularizer.

Imagined rollouts are generated by the true, differentiable system dynamics:
from a shared start state, L bundle members draw their own reparameterized
action sequences. The per-step population variance across members of states
(and hidden states, for recurrent policies) is the regularizer; its gradient
flows pathwise through actions and dynamics. The policy-gradient term is
REINFORCE on normalized lambda-return advantages plus an entropy bonus.

Bundle rows are ordered `b * L + l` for start state b and member l.
"""

import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from chaoscope import autodiff as ad
from chaoscope.config import TrainerConfig
from chaoscope.dynsys import DynamicalSystem, clamp_action, sample_initial
from chaoscope.errors import NonFiniteLossError, NonFiniteStateError, NumericalError, PolicyError
from chaoscope.instrumentation import span
from chaoscope.lyapunov import benettin_spectrum, derive_seeds
from chaoscope.policy import (
    PolicyParams,
    act_mean,
    entropy_of,
    log_prob,
    log_std_of,
    mlp_policy,
    sample_with_noise,
)
from chaoscope.stats import iqm

logger = logging.getLogger(__name__)

MIN_MEMBERS = 2


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """L imagined rollouts per start state.

    `states` and `hidden` hold T+1 entries of shape (B*L, N) and (B*L, H);
    `actions`, `raw_actions`, `log_probs` and `entropies` hold T entries;
    `rewards` is a numpy array of shape (T, B*L). Entries are tape nodes when
    the bundle was imagined with a tape variable for the policy parameters.
    """

    states: list[Any]
    hidden: list[Any]
    actions: list[Any]
    raw_actions: list[Any]
    rewards: np.ndarray
    log_probs: list[Any]
    entropies: list[Any]
    members: int
    batch: int
    member_seeds: list[int] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        """Number of imagined transitions T."""
        return len(self.actions)

    @property
    def returns(self) -> np.ndarray:
        """Undiscounted imagined return of every row."""
        return self.rewards.sum(axis=0)


def _rows(x: Any, members: int) -> np.ndarray:
    return np.repeat(np.atleast_2d(np.asarray(x, dtype=float)), members, axis=0)


def imagine_bundle(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    h0: Any,
    horizon: int,
    members: int,
    seed: int = 0,
    *,
    theta: Any = None,
    member_seeds: Sequence[int] | None = None,
) -> TrajectoryBundle:
    """Roll out `members` sampled action sequences from each start state.

    Args:
        sys: Differentiable system standing in for a learned world model.
        policy: Gaussian policy.
        s0: Start state (N,) or batch of start states (B, N).
        h0: Start hidden state(s); zeros when None.
        horizon: Imagined steps T.
        members: Bundle size L.
        seed: Master seed from which member seeds are derived.
        theta: Tape variable standing in for `policy.theta`.
        member_seeds: Explicit per-member seeds overriding the derived ones.

    Raises:
        PolicyError: The policy is deterministic.
        ValueError: Fewer than two members or a non-positive horizon.
        NonFiniteStateError: An imagined state stopped being finite.
    """
    if not policy.gaussian:
        msg = "imagined bundles need a stochastic policy; a deterministic one has zero spread"
        raise PolicyError(msg)
    if members < MIN_MEMBERS:
        msg = f"a bundle needs at least {MIN_MEMBERS} members, got {members}"
        raise ValueError(msg)
    if horizon < 1:
        msg = f"horizon must be >= 1, got {horizon}"
        raise ValueError(msg)
    seeds = list(member_seeds) if member_seeds is not None else derive_seeds(seed, members)
    if len(seeds) != members:
        msg = f"got {len(seeds)} member seeds for {members} members"
        raise ValueError(msg)

    s: Any = _rows(s0, members)
    rows = len(s)
    batch = rows // members
    m = policy.action_dim
    draws = [np.random.default_rng(ms).standard_normal((horizon, batch, m)) for ms in seeds]
    noise = np.stack(draws, axis=2).reshape(horizon, rows, m)
    h: Any = policy.initial_hidden((rows,)) if h0 is None else _rows(h0, members)
    entropy = entropy_of(log_std_of(policy, theta))

    states, hidden = [s], [h]
    actions: list[Any] = []
    raws: list[Any] = []
    log_probs: list[Any] = []
    rewards = np.empty((horizon, rows))
    for t in range(horizon):
        draw = sample_with_noise(policy, s, h, noise[t], theta=theta)
        a = clamp_action(sys, draw.action)
        rewards[t] = sys.evaluate_reward(ad.value_of(s), ad.value_of(a))
        h_in = ad.stop_gradient(h) if policy.recurrent else None
        log_probs.append(log_prob(policy, ad.stop_gradient(s), h_in, ad.stop_gradient(draw.raw), theta=theta))
        s = sys.transition(s, a)
        h = draw.hidden
        if not np.all(np.isfinite(ad.value_of(s))):
            raise NonFiniteStateError(step=t + 1)
        states.append(s)
        hidden.append(h)
        actions.append(a)
        raws.append(draw.raw)
    return TrajectoryBundle(
        states=states,
        hidden=hidden,
        actions=actions,
        raw_actions=raws,
        rewards=rewards,
        log_probs=log_probs,
        entropies=[entropy] * horizon,
        members=members,
        batch=batch,
        member_seeds=seeds,
    )


def _spread(x: Any, batch: int, members: int) -> Any:
    dim = ad.value_of(x).shape[-1]
    return ad.mean(ad.variance(ad.reshape(x, (batch, members, dim)), axis=1))


def mle_reg_loss(bundle: TrajectoryBundle, *, detach: bool = False) -> Any:
    """Sum over t = 1..T of the member variance of states (plus hidden states), averaged over dimensions and batch.

    With `detach` the value is computed on plain arrays and nothing is
    recorded on the tape.
    """
    if bundle.members < MIN_MEMBERS:
        msg = f"variance across a bundle needs at least {MIN_MEMBERS} members, got {bundle.members}"
        raise ValueError(msg)
    total: Any = 0.0
    for s, h in zip(bundle.states[1:], bundle.hidden[1:], strict=True):
        s = ad.value_of(s) if detach else s
        total = ad.add(total, _spread(s, bundle.batch, bundle.members))
        if ad.value_of(h).shape[-1]:
            h = ad.value_of(h) if detach else h
            total = ad.add(total, _spread(h, bundle.batch, bundle.members))
    return total


def lambda_returns(rewards: Any, values: Any, gamma: float, lam: float) -> np.ndarray:
    """Bootstrapped lambda-returns R_t = r_t + gamma ((1 - lam) v_{t+1} + lam R_{t+1}), R_T = v_T.

    Args:
        rewards: Shape (T, ...).
        values: Shape (T + 1, ...), including the bootstrap tail.
        gamma: Discount.
        lam: Mixing coefficient.

    Returns:
        Array of shape (T + 1, ...).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape[0] != r.shape[0] + 1 or v.shape[1:] != r.shape[1:]:
        msg = f"values must have shape (T + 1, ...) for rewards {r.shape}, got {v.shape}"
        raise ValueError(msg)
    out = np.empty_like(v)
    out[-1] = v[-1]
    for t in range(len(r) - 1, -1, -1):
        out[t] = r[t] + gamma * ((1.0 - lam) * v[t + 1] + lam * out[t + 1])
    return out


@dataclass(frozen=True)
class ReturnScale:
    """Exponential moving average of the 5th-95th percentile range of lambda-returns."""

    value: float = 0.0
    decay: float = 0.99

    def update(self, returns: Any) -> "ReturnScale":
        """Blend in the percentile range of a new batch."""
        low, high = np.percentile(np.asarray(returns, dtype=float), [5.0, 95.0])
        blended = self.decay * self.value + (1.0 - self.decay) * float(high - low)
        return dataclasses.replace(self, value=blended)

    @property
    def normalizer(self) -> float:
        """Advantage divisor max(1, S)."""
        return max(1.0, self.value)


def policy_loss(
    bundle: TrajectoryBundle,
    values: Any,
    returns: Any,
    scale: ReturnScale,
    eta: float,
) -> Any:
    """REINFORCE loss with stop-gradient advantages and an entropy bonus, averaged over rows."""
    total: Any = 0.0
    for t in range(bundle.horizon):
        advantage = ad.stop_gradient(ad.affine(ad.subtract(returns[t], values[t]), 1.0 / scale.normalizer, 0.0))
        term = ad.mean(ad.multiply(advantage, bundle.log_probs[t]))
        if eta:
            term = ad.add(term, ad.multiply(bundle.entropies[t], eta))
        total = ad.add(total, term)
    return ad.multiply(total, -1.0)


def total_loss(policy_loss_node: Any, reg_loss_node: Any, beta: float) -> Any:
    """Policy loss plus beta times the regularizer; the policy loss itself when beta is 0."""
    if reg_loss_node is None or beta == 0:
        return policy_loss_node
    return ad.add(policy_loss_node, ad.multiply(reg_loss_node, beta))


def value_estimates(value: PolicyParams, bundle: TrajectoryBundle) -> np.ndarray:
    """Numeric critic outputs for every bundle state, shape (T + 1, B*L)."""
    return np.stack([act_mean(value, ad.value_of(s)).mean[:, 0] for s in bundle.states])


def value_loss(value: PolicyParams, bundle: TrajectoryBundle, returns: Any, *, theta: Any = None) -> Any:
    """Mean squared error of the critic against stop-gradient lambda-returns."""
    total: Any = 0.0
    for t in range(bundle.horizon):
        pred = act_mean(value, ad.stop_gradient(bundle.states[t]), theta=theta).mean
        target = np.asarray(returns[t], dtype=float)[:, None]
        total = ad.add(total, ad.mean(ad.square(ad.subtract(pred, target))))
    return ad.multiply(total, 1.0 / bundle.horizon)


@dataclass(frozen=True)
class TrainingRecord:
    """One history row; `mle` is None on updates without a spectrum evaluation."""

    update: int
    return_iqm: float
    reg_loss: float
    mle: float | None = None


@dataclass(frozen=True, eq=False)
class TrainingResult:
    """Trained actor and critic with the per-update history."""

    policy: PolicyParams
    value: PolicyParams
    history: list[TrainingRecord]
    clipped_updates: int = 0


def initial_policy(sys: DynamicalSystem, cfg: TrainerConfig) -> PolicyParams:
    """Squashed Gaussian MLP actor for `sys`."""
    return mlp_policy(
        sys.state_dim,
        sys.action_dim,
        cfg.hidden_sizes,
        action_low=sys.action_low,
        action_high=sys.action_high,
        gaussian=True,
        squash=True,
        hidden_dim=cfg.recurrent_dim,
        init_log_std=cfg.init_log_std,
        init_action=cfg.init_action,
        seed=cfg.seed,
    )


def initial_value(sys: DynamicalSystem, cfg: TrainerConfig) -> PolicyParams:
    """Deterministic, unsquashed MLP critic with a scalar output."""
    return mlp_policy(
        sys.state_dim,
        1,
        cfg.hidden_sizes,
        gaussian=False,
        squash=False,
        output_scale=1.0,
        seed=cfg.seed + 1,
    )


def _clip_norm(grad: np.ndarray, limit: float) -> tuple[np.ndarray, bool]:
    norm = float(np.linalg.norm(grad))
    if norm > limit:
        return grad * (limit / norm), True
    return grad, False


def _logged_mle(sys: DynamicalSystem, policy: PolicyParams, s0: np.ndarray, cfg: TrainerConfig) -> float:
    try:
        return benettin_spectrum(sys, policy, s0, cfg.spectrum, cfg.seed).mle
    except NumericalError as exc:
        logger.warning("Spectrum evaluation failed during training: %s", exc)
        return math.nan


def train(
    sys: DynamicalSystem,
    cfg: TrainerConfig,
    *,
    regularized: bool = True,
    on_update: Callable[[TrainingRecord], None] | None = None,
) -> TrainingResult:
    """Train actor and critic by plain gradient descent on imagined bundles.

    Each update imagines bundles from `cfg.batch` start states drawn from the
    system's initial box, steps the actor along the clipped gradient of the
    total loss and the critic along the clipped gradient of its squared error.
    Every `cfg.mle_every` updates (and after the last one) the spectrum of the
    mean policy is estimated from a fixed start state.

    Args:
        sys: The system to control.
        cfg: Trainer settings; all randomness derives from `cfg.seed`.
        regularized: When False the regularizer is never put on the tape,
            whatever `cfg.beta` says.
        on_update: Called with every history record.

    Raises:
        NonFiniteLossError: A loss or gradient stopped being finite; carries
            a diagnostics dictionary.
    """
    policy = initial_policy(sys, cfg)
    value = initial_value(sys, cfg)
    scale = ReturnScale(decay=cfg.return_decay)
    mle_start = sample_initial(sys, derive_seeds(cfg.seed, 1)[0])
    low, high = sys.initial_box()
    use_reg = regularized and cfg.beta > 0
    history: list[TrainingRecord] = []
    clipped = 0

    for u in range(cfg.updates):
        seed_u = int(np.random.SeedSequence([cfg.seed, u]).generate_state(1)[0])
        starts = np.random.default_rng(seed_u).uniform(low, high, size=(cfg.batch, sys.state_dim))
        with span("train_update", update=u, beta=cfg.beta):
            tape = ad.Tape()
            theta = tape.variable(policy.theta)
            phi = tape.variable(value.theta)
            bundle = imagine_bundle(sys, policy, starts, None, cfg.horizon, cfg.members, seed_u, theta=theta)
            values = value_estimates(value, bundle)
            returns = lambda_returns(bundle.rewards, values, cfg.gamma, cfg.lam)
            scale = scale.update(returns[:-1])
            pl = policy_loss(bundle, values, returns, scale, cfg.eta)
            reg = mle_reg_loss(bundle) if use_reg else None
            loss = total_loss(pl, reg, cfg.beta)
            vloss = value_loss(value, bundle, returns, theta=phi)
            reg_value = float(ad.value_of(reg)) if reg is not None else float(mle_reg_loss(bundle, detach=True))

            grad = tape.backward(loss).wrt(theta)
            vgrad = tape.backward(vloss).wrt(phi)
            diagnostics = {
                "update": u,
                "policy_loss": float(ad.value_of(pl)),
                "reg_loss": reg_value,
                "value_loss": float(ad.value_of(vloss)),
                "grad_norm": float(np.linalg.norm(grad)),
                "value_grad_norm": float(np.linalg.norm(vgrad)),
                "log_std": np.asarray(ad.value_of(log_std_of(policy))).tolist(),
            }
            finite = [diagnostics["policy_loss"], diagnostics["value_loss"], reg_value]
            if not (np.all(np.isfinite(finite)) and np.all(np.isfinite(grad)) and np.all(np.isfinite(vgrad))):
                msg = f"non-finite loss or gradient at update {u}"
                raise NonFiniteLossError(msg, diagnostics=diagnostics)

            grad, was_clipped = _clip_norm(grad, cfg.grad_clip)
            vgrad, _ = _clip_norm(vgrad, cfg.grad_clip)
            clipped += was_clipped
            policy = policy.with_theta(policy.theta - cfg.learning_rate * grad)
            value = value.with_theta(value.theta - cfg.value_learning_rate * vgrad)
            logger.debug("update %d: %s", u, diagnostics)

        done = u + 1
        mle = _logged_mle(sys, policy, mle_start, cfg) if done % cfg.mle_every == 0 or done == cfg.updates else None
        record = TrainingRecord(done, iqm(bundle.returns), reg_value, mle)
        history.append(record)
        if mle is not None:
            logger.info("update %d: return IQM %.4f, reg %.4g, MLE %.4f", done, record.return_iqm, reg_value, mle)
        if on_update is not None:
            on_update(record)

    if clipped:
        logger.warning("Gradient norm clipped to %g in %d of %d updates", cfg.grad_clip, clipped, cfg.updates)
    return TrainingResult(policy, value, history, clipped)
