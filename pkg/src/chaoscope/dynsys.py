"""Deterministic discrete-time dynamical systems and their closed loops with a policy.

Every shipped system is an immutable pydantic model. `transition(s, a)` is
written once against the dispatching functions of `chaoscope.autodiff`, so the
same code advances numpy states (with any number of leading batch axes) and
tape nodes for pathwise gradients. Continuous-time systems advance by one
fixed-step RK4 step of length `dt`.

Shipped systems, with their initial-state boxes and rewards:

| id                 | N | M | initial box                                 | reward (in [r_min, r_max])                       |
| ------------------ | - | - | ------------------------------------------- | ------------------------------------------------ |
| `logistic`         | 1 | 1 | s ~ U(0.1, 0.9)                             | `state`: s                                       |
| `henon`            | 2 | 1 | x, y ~ U(-0.1, 0.1)                         | `tolerance`: exp(-x^2)                           |
| `lorenz`           | 3 | 1 | x, y ~ U(-5, 5), z ~ U(20, 30)              | `tolerance`: exp(-(x / 10)^2)                    |
| `pointmass`        | 4 | 2 | positions U(-0.25, 0.25), velocities 0      | `tolerance`: exp(-(x^2 + y^2) / 0.3^2)           |
| `cartpole`         | 4 | 1 | balance: theta ~ U(-0.1, 0.1); swingup: theta ~ U(pi - 0.1, pi + 0.1); rest 0 | balance: exp(-(theta/0.3)^2) exp(-x^2); swingup: (1 + cos theta)/2 exp(-x^2) |
| `logistic_control` | 1 | 1 | s ~ U(0.1, 0.9)                             | `band`: sig((s - 0.15)/0.05) sig((0.95 - s)/0.05) |
| `linear`           | d | 1 | s ~ U(-1, 1)^d                              | `neg_abs`: -min(mean abs(s), 1)                  |

Every system also accepts `reward = "constant"` (1 per step). Actions outside
the declared bounds are clamped, never rejected. Hénon, Lorenz and the linear
contraction ignore their action.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Annotated, Any, ClassVar, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from chaoscope import autodiff as ad
from chaoscope.config import NoiseConfig
from chaoscope.errors import NonFiniteStateError, NotDifferentiableError, PolicyError
from chaoscope.policy import PolicyParams, act_mean, sample_with_noise
from chaoscope.policy import jacobian as policy_jacobian

logger = logging.getLogger(__name__)

type JacobianMethod = Literal["autodiff", "fd", "analytic"]


def rk4(field_fn: Callable[[Any, Any], Any], s: Any, a: Any, dt: float) -> Any:
    """One classical Runge-Kutta step with the action held constant."""
    k1 = field_fn(s, a)
    k2 = field_fn(s + (0.5 * dt) * k1, a)
    k3 = field_fn(s + (0.5 * dt) * k2, a)
    k4 = field_fn(s + dt * k3, a)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _constant_reward(s: np.ndarray) -> np.ndarray:
    return np.ones(np.shape(s)[:-1])


class DynamicalSystem(BaseModel, ABC):
    """Base class for closed-loop plants: transition, bounded reward, initial box."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    continuous: ClassVar[bool] = False

    @property
    @abstractmethod
    def state_dim(self) -> int:
        """Dimension N of the state."""

    @property
    @abstractmethod
    def action_dim(self) -> int:
        """Dimension M of the action."""

    @property
    @abstractmethod
    def action_low(self) -> np.ndarray:
        """Lower action bounds."""

    @property
    @abstractmethod
    def action_high(self) -> np.ndarray:
        """Upper action bounds."""

    @property
    @abstractmethod
    def reward_range(self) -> tuple[float, float]:
        """Declared bounds [r_min, r_max] of the per-step reward."""

    @property
    def step_size(self) -> float:
        """Physical duration of one step (1 for maps)."""
        return 1.0

    @abstractmethod
    def transition(self, s: Any, a: Any) -> Any:
        """Successor state for arrays or tape nodes of shape (..., N) and (..., M)."""

    @abstractmethod
    def linearize(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Analytic derivatives (df/ds, df/da) of one step at a single state."""

    @abstractmethod
    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Per-step reward for numpy states and actions (batched over leading axes)."""

    @abstractmethod
    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the uniform initial-state distribution."""


class MapSystem(DynamicalSystem, ABC):
    """Discrete-time map given in closed form."""


class FlowSystem(DynamicalSystem, ABC):
    """Continuous-time system advanced by fixed-step RK4."""

    continuous: ClassVar[bool] = True
    dt: float = Field(default=0.01, gt=0.0, description="Integrator step in seconds")

    @property
    def step_size(self) -> float:
        """Integrator step dt."""
        return self.dt

    @abstractmethod
    def vector_field(self, s: Any, a: Any) -> Any:
        """Time derivative of the state."""

    @abstractmethod
    def field_jacobian(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Derivatives of the vector field with respect to state and action."""

    def transition(self, s: Any, a: Any) -> Any:
        """One RK4 step of duration dt."""
        return rk4(self.vector_field, s, a, self.dt)

    def linearize(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact derivative of the RK4 step, propagated through the variational equations."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        n, m = self.state_dim, self.action_dim
        d_s = np.hstack([np.eye(n), np.zeros((n, m))])
        d_a = np.hstack([np.zeros((m, n)), np.eye(m)])
        dt = self.dt

        def stage(p: np.ndarray, dp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            fs, fa = self.field_jacobian(p, a)
            return self.vector_field(p, a), fs @ dp + fa @ d_a

        k1, j1 = stage(s, d_s)
        k2, j2 = stage(s + 0.5 * dt * k1, d_s + 0.5 * dt * j1)
        k3, j3 = stage(s + 0.5 * dt * k2, d_s + 0.5 * dt * j2)
        _, j4 = stage(s + dt * k3, d_s + dt * j3)
        total = d_s + (dt / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4)
        return total[:, :n], total[:, n:]


class _UnusedAction:
    """Mixin for systems whose dynamics ignore the action."""

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def action_low(self) -> np.ndarray:
        return np.array([-1.0])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([1.0])


class LogisticMap(MapSystem):
    """Logistic map s' = a s (1 - s) with the growth rate a in [0, 4] as the action."""

    id: Literal["logistic"] = "logistic"
    reward: Literal["state", "constant"] = "state"

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def action_low(self) -> np.ndarray:
        return np.array([0.0])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([4.0])

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (0.0, 1.0)

    def transition(self, s: Any, a: Any) -> Any:
        return a * s * (1.0 - s)

    def linearize(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = float(np.asarray(s).reshape(-1)[0])
        r = float(np.asarray(a).reshape(-1)[0])
        return np.array([[r * (1.0 - 2.0 * x)]]), np.array([[x * (1.0 - x)]])

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        return np.clip(np.asarray(s)[..., 0], 0.0, 1.0)

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([0.1]), np.array([0.9])


class LogisticControl(LogisticMap):
    """Logistic map whose reward keeps the state inside a band away from 0 and 1."""

    id: Literal["logistic_control"] = "logistic_control"  # type: ignore[assignment]
    reward: Literal["band", "constant"] = "band"  # type: ignore[assignment]
    band_low: float = Field(default=0.15, ge=0.0, le=1.0)
    band_high: float = Field(default=0.95, ge=0.0, le=1.0)
    band_width: float = Field(default=0.05, gt=0.0, description="Softness of the band edges")

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        x = np.asarray(s)[..., 0]
        lower = ad.sigmoid((x - self.band_low) / self.band_width)
        upper = ad.sigmoid((self.band_high - x) / self.band_width)
        return lower * upper


class HenonMap(_UnusedAction, MapSystem):
    """Hénon map x' = 1 - a x^2 + y, y' = b x."""

    id: Literal["henon"] = "henon"
    a: float = 1.4
    b: float = 0.3
    reward: Literal["tolerance", "constant"] = "tolerance"

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (0.0, 1.0)

    def transition(self, s: Any, a: Any) -> Any:
        x = s[..., 0]
        y = s[..., 1]
        return ad.stack([1.0 - self.a * x * x + y, self.b * x], axis=-1)

    def linearize(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = float(np.asarray(s)[0])
        return np.array([[-2.0 * self.a * x, 1.0], [self.b, 0.0]]), np.zeros((2, 1))

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        return np.exp(-np.asarray(s)[..., 0] ** 2)

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([-0.1, -0.1]), np.array([0.1, 0.1])


class LinearContraction(_UnusedAction, MapSystem):
    """Uniform contraction s' = c s."""

    id: Literal["linear"] = "linear"
    rate: float = Field(default=0.9, description="Contraction factor c")
    dim: int = Field(default=1, ge=1)
    reward: Literal["neg_abs", "constant"] = "neg_abs"

    @property
    def state_dim(self) -> int:
        return self.dim

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (-1.0, 0.0)

    def transition(self, s: Any, a: Any) -> Any:
        return self.rate * s

    def linearize(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.rate * np.eye(self.dim), np.zeros((self.dim, 1))

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        return -np.minimum(np.mean(np.abs(s), axis=-1), 1.0)

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        return -np.ones(self.dim), np.ones(self.dim)


class Lorenz(_UnusedAction, FlowSystem):
    """Lorenz flow."""

    id: Literal["lorenz"] = "lorenz"
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    reward: Literal["tolerance", "constant"] = "tolerance"

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (0.0, 1.0)

    def vector_field(self, s: Any, a: Any) -> Any:
        x, y, z = s[..., 0], s[..., 1], s[..., 2]
        return ad.stack(
            [self.sigma * (y - x), x * (self.rho - z) - y, x * y - self.beta * z],
            axis=-1,
        )

    def field_jacobian(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, y, z = (float(v) for v in s)
        fs = np.array(
            [
                [-self.sigma, self.sigma, 0.0],
                [self.rho - z, -1.0, -x],
                [y, x, -self.beta],
            ],
        )
        return fs, np.zeros((3, 1))

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        return np.exp(-((np.asarray(s)[..., 0] / 10.0) ** 2))

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([-5.0, -5.0, 20.0]), np.array([5.0, 5.0, 30.0])


class Pointmass(FlowSystem):
    """Planar point mass with viscous damping; state (x, y, vx, vy) in metres and m/s, force in N."""

    id: Literal["pointmass"] = "pointmass"
    mass: float = Field(default=1.0, gt=0.0)
    damping: float = Field(default=0.1, ge=0.0, description="Viscous coefficient in N s/m")
    force_bound: float = Field(default=1.0, gt=0.0)
    dt: float = Field(default=0.02, gt=0.0)
    reward: Literal["tolerance", "constant"] = "tolerance"

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def action_low(self) -> np.ndarray:
        return np.full(2, -self.force_bound)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(2, self.force_bound)

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (0.0, 1.0)

    def vector_field(self, s: Any, a: Any) -> Any:
        vx, vy = s[..., 2], s[..., 3]
        c, m = self.damping, self.mass
        return ad.stack([vx, vy, (a[..., 0] - c * vx) / m, (a[..., 1] - c * vy) / m], axis=-1)

    def field_jacobian(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = -self.damping / self.mass
        fs = np.array(
            [
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, k, 0.0],
                [0.0, 0.0, 0.0, k],
            ],
        )
        fa = np.zeros((4, 2))
        fa[2, 0] = fa[3, 1] = 1.0 / self.mass
        return fs, fa

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        s = np.asarray(s)
        return np.exp(-(s[..., 0] ** 2 + s[..., 1] ** 2) / 0.3**2)

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([-0.25, -0.25, 0.0, 0.0]), np.array([0.25, 0.25, 0.0, 0.0])


class Cartpole(FlowSystem):
    """Frictionless cart-pole; state (x, x_dot, theta, theta_dot) with theta = 0 upright.

    Uses the classic point-mass-on-rod equations with half-length `l`:
    theta_dd = (g sin - cos (F + m_p l w^2 sin) / M) / (l (4/3 - m_p cos^2 / M)),
    x_dd = (F + m_p l (w^2 sin - theta_dd cos)) / M.
    """

    id: Literal["cartpole"] = "cartpole"
    task: Literal["balance", "swingup"] = "balance"
    cart_mass: float = Field(default=1.0, gt=0.0)
    pole_mass: float = Field(default=0.1, gt=0.0)
    half_length: float = Field(default=0.5, gt=0.0)
    gravity: float = 9.81
    force_bound: float = Field(default=10.0, gt=0.0)
    reward: Literal["task", "constant"] = "task"

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def action_low(self) -> np.ndarray:
        return np.array([-self.force_bound])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([self.force_bound])

    @property
    def reward_range(self) -> tuple[float, float]:
        return (1.0, 1.0) if self.reward == "constant" else (0.0, 1.0)

    @property
    def total_mass(self) -> float:
        """Cart plus pole mass."""
        return self.cart_mass + self.pole_mass

    def vector_field(self, s: Any, a: Any) -> Any:
        x_dot, theta, omega = s[..., 1], s[..., 2], s[..., 3]
        force = a[..., 0]
        m_p, l, total = self.pole_mass, self.half_length, self.total_mass
        sin_t = ad.sin(theta)
        cos_t = ad.cos(theta)
        temp = (force + (m_p * l) * omega * omega * sin_t) / total
        theta_dd = (self.gravity * sin_t - cos_t * temp) / (l * (4.0 / 3.0 - (m_p / total) * cos_t * cos_t))
        x_dd = temp - (m_p * l / total) * theta_dd * cos_t
        return ad.stack([x_dot, x_dd, omega, theta_dd], axis=-1)

    def field_jacobian(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, _, theta, omega = (float(v) for v in s)
        force = float(np.asarray(a).reshape(-1)[0])
        m_p, l, total, g = self.pole_mass, self.half_length, self.total_mass, self.gravity
        sin_t, cos_t = math.sin(theta), math.cos(theta)

        temp = (force + m_p * l * omega**2 * sin_t) / total
        temp_theta = m_p * l * omega**2 * cos_t / total
        temp_omega = 2.0 * m_p * l * omega * sin_t / total
        temp_force = 1.0 / total

        num = g * sin_t - cos_t * temp
        den = l * (4.0 / 3.0 - m_p * cos_t**2 / total)
        num_theta = g * cos_t + sin_t * temp - cos_t * temp_theta
        den_theta = l * 2.0 * m_p * cos_t * sin_t / total
        theta_dd = num / den
        tdd_theta = (num_theta * den - num * den_theta) / den**2
        tdd_omega = -cos_t * temp_omega / den
        tdd_force = -cos_t * temp_force / den

        k = m_p * l / total
        xdd_theta = temp_theta - k * (tdd_theta * cos_t - theta_dd * sin_t)
        xdd_omega = temp_omega - k * tdd_omega * cos_t
        xdd_force = temp_force - k * tdd_force * cos_t

        fs = np.array(
            [
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, xdd_theta, xdd_omega],
                [0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, tdd_theta, tdd_omega],
            ],
        )
        return fs, np.array([[0.0], [xdd_force], [0.0], [tdd_force]])

    def energy(self, s: np.ndarray) -> np.ndarray:
        """Total mechanical energy (kinetic plus potential, pivot height as zero)."""
        s = np.asarray(s, dtype=float)
        x_dot, theta, omega = s[..., 1], s[..., 2], s[..., 3]
        m_p, l = self.pole_mass, self.half_length
        kinetic = (
            0.5 * self.total_mass * x_dot**2
            + m_p * l * np.cos(theta) * x_dot * omega
            + (2.0 / 3.0) * m_p * l**2 * omega**2
        )
        return kinetic + m_p * self.gravity * l * np.cos(theta)

    def evaluate_reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.reward == "constant":
            return _constant_reward(s)
        s = np.asarray(s)
        x = s[..., 0]
        theta = np.arctan2(np.sin(s[..., 2]), np.cos(s[..., 2]))
        centred = np.exp(-(x**2))
        if self.task == "balance":
            return np.exp(-((theta / 0.3) ** 2)) * centred
        return 0.5 * (1.0 + np.cos(theta)) * centred

    def initial_box(self) -> tuple[np.ndarray, np.ndarray]:
        centre = 0.0 if self.task == "balance" else math.pi
        return np.array([0.0, 0.0, centre - 0.1, 0.0]), np.array([0.0, 0.0, centre + 0.1, 0.0])


SystemConfig = Annotated[
    LogisticMap | LogisticControl | HenonMap | Lorenz | Pointmass | Cartpole | LinearContraction,
    Field(discriminator="id"),
]


# Operations -----------------------------------------------------------------


def clamp_action(sys: DynamicalSystem, a: Any) -> Any:
    """Clamp actions to the declared bounds (saturating actuator)."""
    return ad.clip(a, sys.action_low, sys.action_high)


def _check_state(sys: DynamicalSystem, s: np.ndarray) -> None:
    if s.shape[-1:] != (sys.state_dim,):
        msg = f"{sys.id} expects states of dimension {sys.state_dim}, got shape {s.shape}"
        raise ValueError(msg)


def step(sys: DynamicalSystem, s: Any, a: Any) -> np.ndarray:
    """Advance one step from `s` under action `a` (clamped to bounds)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    _check_state(sys, s)
    if a.shape[-1:] != (sys.action_dim,):
        msg = f"expected actions of dimension {sys.action_dim}, got shape {a.shape}"
        raise ValueError(msg)
    if not np.all(np.isfinite(s)):
        raise NonFiniteStateError
    return np.asarray(sys.transition(s, clamp_action(sys, a)), dtype=float)


def sample_initial(sys: DynamicalSystem, seed: int) -> np.ndarray:
    """Draw an initial state from the system's uniform box."""
    low, high = sys.initial_box()
    return np.random.default_rng(seed).uniform(low, high)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States (T+1, N), actions (T, M), rewards (T,), policy observations (T, N) and hidden states (T+1, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    observations: np.ndarray
    hidden: np.ndarray

    @property
    def horizon(self) -> int:
        """Number of transitions T."""
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        """Undiscounted reward sum."""
        return float(np.sum(self.rewards))

    def csv_header(self) -> list[str]:
        """Column names `t,s_0..s_{N-1},a_0..a_{M-1},r`."""
        n = self.states.shape[1]
        m = self.actions.shape[1]
        return ["t", *(f"s_{i}" for i in range(n)), *(f"a_{j}" for j in range(m)), "r"]

    def csv_rows(self) -> list[list[str]]:
        """One row per state; the final state has empty action and reward cells."""
        rows: list[list[str]] = []
        m = self.actions.shape[1]
        for t, s in enumerate(self.states):
            cells = [str(t), *(repr(float(v)) for v in s)]
            if t < self.horizon:
                cells += [repr(float(v)) for v in self.actions[t]]
                cells.append(repr(float(self.rewards[t])))
            else:
                cells += [""] * (m + 1)
            rows.append(cells)
        return rows


def check_dimensions(sys: DynamicalSystem, policy: PolicyParams) -> None:
    """Raise PolicyError unless the policy maps the system's states to its actions."""
    if policy.obs_dim != sys.state_dim or policy.action_dim != sys.action_dim:
        msg = f"policy maps {policy.obs_dim} -> {policy.action_dim} but the system has N={sys.state_dim}, M={sys.action_dim}"
        raise PolicyError(msg)


@dataclass(frozen=True)
class ClosedLoop:
    """The map z -> f(s, pi(s, h)) on the augmented state z = (s, h) under mean actions."""

    system: DynamicalSystem
    policy: PolicyParams
    _dims: tuple[int, int] = field(init=False, repr=False)
    _bounds: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        """Check that policy and system dimensions agree."""
        check_dimensions(self.system, self.policy)
        object.__setattr__(self, "_dims", (self.system.state_dim, self.policy.hidden_dim))
        object.__setattr__(self, "_bounds", (self.system.action_low, self.system.action_high))

    @property
    def dim(self) -> int:
        """Dimension of the augmented state."""
        return sum(self._dims)

    def augment(self, s: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
        """Join a state and a hidden state (zeros when None)."""
        s = np.asarray(s, dtype=float)
        if not self.policy.recurrent:
            return s
        h = self.policy.initial_hidden(s.shape[:-1]) if h is None else np.asarray(h, dtype=float)
        return np.concatenate([s, h], axis=-1)

    def split(self, z: Any) -> tuple[Any, Any]:
        """Inverse of `augment`; the hidden part is None for memoryless policies."""
        n = self._dims[0]
        if not self.policy.recurrent:
            return z, None
        return z[..., :n], z[..., n:]

    def actions(self, z: Any) -> tuple[Any, Any, Any]:
        """Raw mean action, clamped action and next hidden state."""
        s, h = self.split(z)
        out = act_mean(self.policy, s, h)
        return out.mean, ad.clip(out.mean, *self._bounds), out.hidden

    def step(self, z: Any) -> Any:
        """Advance the augmented state by one step."""
        s, _ = self.split(z)
        _, a, h_next = self.actions(z)
        s_next = self.system.transition(s, a)
        if not self.policy.recurrent:
            return s_next
        return ad.concat([s_next, h_next], axis=-1)


def rollout(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s0: Any,
    steps: int,
    noise: NoiseConfig | None = None,
    seed: int = 0,
    *,
    stochastic: bool = False,
    h0: np.ndarray | None = None,
) -> Trajectory:
    """Simulate the closed loop for `steps` transitions.

    The policy observes s_t + sigma * scale * eta_t with eta_t standard normal
    while the system always advances from the true state. Gaussian policies
    act at their mean unless `stochastic` is set.

    Raises:
        NonFiniteStateError: The state stopped being finite; carries the step index.
    """
    if steps < 1:
        msg = f"steps must be >= 1, got {steps}"
        raise ValueError(msg)
    noise = noise or NoiseConfig()
    check_dimensions(sys, policy)
    s = np.asarray(s0, dtype=float)
    _check_state(sys, s)
    if not np.all(np.isfinite(s)):
        raise NonFiniteStateError(step=0)
    n, m = sys.state_dim, sys.action_dim
    if noise.scale is not None and len(noise.scale) != n:
        msg = f"noise scale needs {n} entries for {sys.id}, got {len(noise.scale)}"
        raise ValueError(msg)
    scale = noise.sigma * (np.asarray(noise.scale, dtype=float) if noise.scale is not None else np.ones(n))
    obs_rng, act_rng = (np.random.default_rng(c) for c in np.random.SeedSequence([noise.seed, seed]).spawn(2))

    h = policy.initial_hidden() if h0 is None else np.asarray(h0, dtype=float)
    states = np.empty((steps + 1, n))
    observations = np.empty((steps, n))
    actions = np.empty((steps, m))
    rewards = np.empty(steps)
    hidden = np.empty((steps + 1, policy.hidden_dim))
    states[0] = s
    hidden[0] = h
    for t in range(steps):
        obs = s + scale * obs_rng.standard_normal(n) if noise.sigma > 0 else s
        if stochastic:
            draw = sample_with_noise(policy, obs, h, act_rng.standard_normal(m))
            a, h = draw.action, draw.hidden
        else:
            a, _, h = act_mean(policy, obs, h)
        a = clamp_action(sys, np.asarray(a, dtype=float))
        rewards[t] = float(sys.evaluate_reward(s, a))
        s = np.asarray(sys.transition(s, a), dtype=float)
        if not np.all(np.isfinite(s)):
            raise NonFiniteStateError(step=t + 1)
        observations[t] = obs
        actions[t] = a
        states[t + 1] = s
        hidden[t + 1] = h
    logger.debug("Rollout of %s for %d steps, total reward %.6g", sys.id, steps, rewards.sum())
    return Trajectory(states, actions, rewards, observations, hidden)


def discounted_return(rewards: Any, gamma: float) -> float:
    """Sum of gamma^t r_t."""
    if not 0.0 <= gamma < 1.0:
        msg = f"gamma must lie in [0, 1), got {gamma}"
        raise ValueError(msg)
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if r.size == 0:
        return 0.0
    return float(np.sum(r * gamma ** np.arange(r.size)))


def _finite_difference(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        cols.append((np.asarray(fn(z + e)) - np.asarray(fn(z - e))) / (2.0 * h))
    return np.stack(cols, axis=1)


def _check_smooth(loop: ClosedLoop, z: np.ndarray) -> None:
    raw, _, _ = loop.actions(z)
    raw = np.asarray(raw, dtype=float)
    at_bound = (raw == loop.system.action_low) | (raw == loop.system.action_high)
    if not np.any(at_bound) or loop.policy.kind == "none":
        return
    if not loop.policy.recurrent:
        s, _ = loop.split(z)
        if not np.any(policy_jacobian(loop.policy, s)[at_bound]):
            return
    msg = f"closed loop is not differentiable where the action {raw.tolist()} sits exactly on a bound"
    raise NotDifferentiableError(msg)


def closed_loop_jacobian(
    sys: DynamicalSystem,
    policy: PolicyParams,
    s: Any,
    h: Any = None,
    *,
    method: JacobianMethod = "autodiff",
    fd_step: float = 1e-6,
) -> np.ndarray:
    """Jacobian of z -> f(s, pi(s)) on the augmented state (just s for memoryless policies).

    Args:
        sys: The plant.
        policy: Feedback policy, evaluated at its mean.
        s: State at which to differentiate.
        h: Hidden state for recurrent policies.
        method: `autodiff` (reverse mode), `fd` (central differences with
            `fd_step`) or `analytic` (closed-form `linearize` and policy
            Jacobian; memoryless policies only).
        fd_step: Finite-difference step.

    Raises:
        NotDifferentiableError: The raw action sits exactly on an action bound
            while the policy is sensitive to the state.
    """
    loop = ClosedLoop(sys, policy)
    z = loop.augment(s, h)
    if z.ndim != 1:
        msg = f"closed_loop_jacobian expects a single state, got shape {z.shape}"
        raise ValueError(msg)
    _check_smooth(loop, z)

    if method == "fd":
        return _finite_difference(lambda x: loop.step(x), z, fd_step)

    if method == "analytic":
        if policy.recurrent:
            msg = "analytic closed-loop Jacobian needs a memoryless policy"
            raise PolicyError(msg)
        raw, a, _ = loop.actions(z)
        a_mat, b_mat = sys.linearize(z, np.asarray(a))
        inside = ((raw > sys.action_low) & (raw < sys.action_high)).astype(float)
        return a_mat + b_mat @ (inside[:, None] * policy_jacobian(policy, z))

    tape = ad.Tape()
    zv = tape.variable(z)
    try:
        out = loop.step(zv)
    except (ad.ShapeError, TypeError) as exc:
        logger.debug("Falling back to finite differences for %s: %s", sys.id, exc)
        return _finite_difference(lambda x: loop.step(x), z, fd_step)
    return np.stack([tape.backward(out[i]).wrt(zv) for i in range(loop.dim)])
