"""Parameterized policies: no-action baseline, linear, tanh MLP, optional Elman recurrence.

All parameters live in one flat vector so that a single tape variable carries
the whole policy during training. Evaluation functions accept numpy arrays or
`autodiff.Var` nodes for states and parameters alike; leading axes of the
state are treated as a batch.

Parameter layout (row-major, in this order):

* recurrent policies: `W_h` (H x H), `W_s` (H x obs), `b_h` (H)
* each dense layer k: `W{k}` (out x in), `b{k}` (out)
* Gaussian policies: `log_std` (action dim), clamped to [-5, 2]

Squashing policies map the last layer through tanh onto the action box. The
log-probability of a Gaussian policy is the density of the pre-squash draw.
"""

import dataclasses
import functools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, NamedTuple

import numpy as np

from chaoscope import autodiff as ad
from chaoscope.errors import PolicyError, WeightFileError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

WEIGHTS_HEADER = "# chaoscope policy weights"
WEIGHTS_FORMAT = 1
MIN_LAYERS = 2

PolicyKind = Literal["none", "linear", "mlp"]


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Shapes, flags and the flat parameter vector of a policy."""

    kind: PolicyKind
    obs_dim: int
    layer_sizes: tuple[int, ...]
    theta: np.ndarray
    activation: Literal["tanh"] = "tanh"
    squash: bool = False
    gaussian: bool = False
    hidden_dim: int = 0
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        """Validate the layout and freeze the parameter vector."""
        theta = np.array(self.theta, dtype=float).reshape(-1)
        expected = parameter_count(self)
        if theta.size != expected:
            msg = f"expected {expected} parameters, found {theta.size}"
            raise PolicyError(msg)
        if self.kind != "none" and self.layer_sizes[0] != self.obs_dim + self.hidden_dim:
            msg = f"first layer takes {self.layer_sizes[0]} inputs, expected obs_dim + hidden_dim = {self.obs_dim + self.hidden_dim}"
            raise PolicyError(msg)
        if self.squash and (self.action_low is None or self.action_high is None):
            msg = "squashing policies need action bounds"
            raise PolicyError(msg)
        if self.gaussian:
            sl = _slices(self)["log_std"]
            theta[sl[0]] = np.clip(theta[sl[0]], LOG_STD_MIN, LOG_STD_MAX)
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def action_dim(self) -> int:
        """Dimension of the action vector."""
        return self.layer_sizes[-1]

    @property
    def recurrent(self) -> bool:
        """Whether the policy carries a hidden state."""
        return self.hidden_dim > 0

    def initial_hidden(self, batch: tuple[int, ...] = ()) -> np.ndarray:
        """Zero hidden state (empty for memoryless policies)."""
        return np.zeros((*batch, self.hidden_dim))

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        """Copy with a new parameter vector."""
        return dataclasses.replace(self, theta=np.asarray(theta, dtype=float))


class PolicyOutput(NamedTuple):
    """Mean action, log-std (None for deterministic policies) and next hidden state."""

    mean: Any
    log_std: Any
    hidden: Any


class PolicySample(NamedTuple):
    """Reparameterized draw from a Gaussian policy."""

    action: Any
    raw: Any
    log_prob: Any
    hidden: Any


type Layout = tuple[tuple[str, tuple[int, ...]], ...]


@functools.cache
def _layout_for(kind: str, obs_dim: int, layer_sizes: tuple[int, ...], hidden_dim: int, *, gaussian: bool) -> Layout:
    if kind == "none":
        return ()
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if hidden_dim:
        h = hidden_dim
        shapes += [("W_h", (h, h)), ("W_s", (h, obs_dim)), ("b_h", (h,))]
    for k, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:], strict=True)):
        shapes += [(f"W{k}", (n_out, n_in)), (f"b{k}", (n_out,))]
    if gaussian:
        shapes.append(("log_std", (layer_sizes[-1],)))
    return tuple(shapes)


def _layout(params: PolicyParams) -> Layout:
    return _layout_for(params.kind, params.obs_dim, tuple(params.layer_sizes), params.hidden_dim, gaussian=params.gaussian)


@functools.cache
def _slice_table(layout: Layout) -> dict[str, tuple[slice, tuple[int, ...]]]:
    out: dict[str, tuple[slice, tuple[int, ...]]] = {}
    offset = 0
    for name, shape in layout:
        size = math.prod(shape)
        out[name] = (slice(offset, offset + size), shape)
        offset += size
    return out


def _slices(params: PolicyParams) -> dict[str, tuple[slice, tuple[int, ...]]]:
    return _slice_table(_layout(params))


def parameter_count(params: PolicyParams) -> int:
    """Number of scalars implied by the layer shapes."""
    return sum(math.prod(shape) for _, shape in _layout(params))


def unpack(params: PolicyParams, theta: Any = None) -> dict[str, Any]:
    """Split a flat parameter vector (array or tape node) into named tensors."""
    theta = params.theta if theta is None else theta
    return {name: ad.reshape(theta[sl], shape) for name, (sl, shape) in _slices(params).items()}


def _dense(x: Any, w: Any, b: Any) -> Any:
    if ad.value_of(x).ndim == 1:
        return ad.add(ad.matmul(w, x), b)
    return ad.add_row(ad.matmul(x, ad.transpose(w)), b)


def _bounds(params: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    low = np.asarray(params.action_low, dtype=float)
    high = np.asarray(params.action_high, dtype=float)
    return 0.5 * (high - low), 0.5 * (high + low)


def _check_obs(params: PolicyParams, s: Any) -> None:
    shape = ad.value_of(s).shape
    if not shape or shape[-1] != params.obs_dim:
        msg = f"policy expects observations of dimension {params.obs_dim}, got shape {shape}"
        raise PolicyError(msg)


def _forward(params: PolicyParams, s: Any, h: Any, theta: Any) -> tuple[Any, Any, Any]:
    """Pre-squash mean, clamped log-std and next hidden state."""
    _check_obs(params, s)
    batch = ad.value_of(s).shape[:-1]
    if params.kind == "none":
        return np.zeros((*batch, params.action_dim)), None, params.initial_hidden(batch)

    w = unpack(params, theta)
    x = s
    h_next: Any = params.initial_hidden(batch)
    if params.recurrent:
        h_prev = params.initial_hidden(batch) if h is None else h
        if ad.value_of(h_prev).shape != (*batch, params.hidden_dim):
            msg = f"hidden state must have shape {(*batch, params.hidden_dim)}, got {ad.value_of(h_prev).shape}"
            raise PolicyError(msg)
        pre = ad.add(_dense(h_prev, w["W_h"], np.zeros(params.hidden_dim)), _dense(s, w["W_s"], w["b_h"]))
        h_next = ad.tanh(pre)
        x = ad.concat([s, h_next], axis=-1)

    n_layers = len(params.layer_sizes) - 1
    for k in range(n_layers):
        x = _dense(x, w[f"W{k}"], w[f"b{k}"])
        if k < n_layers - 1:
            x = ad.tanh(x)

    log_std = ad.clip(w["log_std"], LOG_STD_MIN, LOG_STD_MAX) if params.gaussian else None
    return x, log_std, h_next


def _squash(params: PolicyParams, raw: Any) -> Any:
    if not params.squash:
        return raw
    half, mid = _bounds(params)
    return ad.affine(ad.tanh(raw), half, mid)


def act_mean(params: PolicyParams, s: Any, h: Any = None, *, theta: Any = None) -> PolicyOutput:
    """Deterministic action (the mean for Gaussian policies).

    Args:
        params: Policy description.
        s: Observation, shape (..., obs_dim).
        h: Hidden state for recurrent policies (zeros when None).
        theta: Optional replacement for `params.theta`, e.g. a tape variable.

    Returns:
        Squashed mean action, log-std vector (None if deterministic) and the
        next hidden state.
    """
    raw, log_std, h_next = _forward(params, s, h, theta)
    return PolicyOutput(_squash(params, raw), log_std, h_next)


def gaussian_log_prob(raw: Any, mean: Any, log_std: Any) -> Any:
    """Diagonal-Gaussian log-density of `raw`, summed over the last axis."""
    shape = ad.value_of(raw).shape
    inv_std = ad.exp(ad.multiply(log_std, -1.0))
    log_det = ad.sum_(log_std)
    if len(shape) > 1:
        inv_std = ad.broadcast_to(inv_std, shape)
        log_det = ad.broadcast_to(log_det, shape[:-1])
    z = ad.multiply(ad.subtract(raw, mean), inv_std)
    quad = ad.sum_(ad.square(z), axis=-1)
    return ad.affine(ad.add(quad * 0.5, log_det), -1.0, -shape[-1] * _HALF_LOG_2PI)


def sample_with_noise(params: PolicyParams, s: Any, h: Any, noise: Any, *, theta: Any = None) -> PolicySample:
    """Reparameterized action `squash(mean + std * noise)` for given standard-normal noise."""
    if not params.gaussian:
        msg = "policy has no sampler"
        raise PolicyError(msg)
    raw_mean, log_std, h_next = _forward(params, s, h, theta)
    shape = ad.value_of(raw_mean).shape
    noise = np.asarray(noise, dtype=float)
    if noise.shape != shape:
        msg = f"noise must have shape {shape}, got {noise.shape}"
        raise PolicyError(msg)
    std = ad.exp(log_std)
    if len(shape) > 1:
        std = ad.broadcast_to(std, shape)
    raw = ad.add(raw_mean, ad.multiply(std, noise))
    log_prob = gaussian_log_prob(ad.stop_gradient(raw), raw_mean, log_std)
    return PolicySample(_squash(params, raw), raw, log_prob, h_next)


def log_prob(params: PolicyParams, s: Any, h: Any, raw: Any, *, theta: Any = None) -> Any:
    """Log-density of a given pre-squash draw under the policy at (s, h)."""
    if not params.gaussian:
        msg = "policy has no sampler"
        raise PolicyError(msg)
    raw_mean, log_std, _ = _forward(params, s, h, theta)
    return gaussian_log_prob(raw, raw_mean, log_std)


def sample_action(params: PolicyParams, s: Any, h: Any = None, seed: int = 0) -> PolicySample:
    """Draw an action with standard-normal noise from a seeded generator."""
    if not params.gaussian:
        msg = "policy has no sampler"
        raise PolicyError(msg)
    shape = (*np.shape(ad.value_of(s))[:-1], params.action_dim)
    noise = np.random.default_rng(seed).standard_normal(shape)
    return sample_with_noise(params, s, h, noise)


def log_std_of(params: PolicyParams, theta: Any = None) -> Any:
    """Clamped log-std vector, taken from `theta` when given."""
    if not params.gaussian:
        msg = "policy has no sampler"
        raise PolicyError(msg)
    return ad.clip(unpack(params, theta)["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def entropy_of(log_std: Any) -> Any:
    """Analytic diagonal-Gaussian entropy for a log-std vector."""
    return ad.affine(ad.sum_(log_std), 1.0, HALF_LOG_2PI_E * ad.value_of(log_std).size)


def entropy(params: PolicyParams, s: Any = None, h: Any = None) -> float:
    """Entropy of the action distribution; log-stds do not depend on the state."""
    del s, h
    return float(entropy_of(log_std_of(params)))


def jacobian(params: PolicyParams, s: np.ndarray) -> np.ndarray:
    """Analytic derivative of the mean action with respect to a single observation."""
    if params.recurrent:
        msg = "analytic policy Jacobian is defined for memoryless policies only"
        raise PolicyError(msg)
    s = np.asarray(s, dtype=float)
    _check_obs(params, s)
    if params.kind == "none":
        return np.zeros((params.action_dim, params.obs_dim))
    w = unpack(params)
    x = s
    jac = np.eye(params.obs_dim)
    n_layers = len(params.layer_sizes) - 1
    for k in range(n_layers):
        x = w[f"W{k}"] @ x + w[f"b{k}"]
        jac = w[f"W{k}"] @ jac
        if k < n_layers - 1:
            x = np.tanh(x)
            jac = (1.0 - x * x)[:, None] * jac
    if params.squash:
        half, _ = _bounds(params)
        jac = (half * (1.0 - np.tanh(x) ** 2))[:, None] * jac
    return jac


def no_action_policy(obs_dim: int, action_dim: int) -> PolicyParams:
    """Baseline that always outputs the zero action."""
    return PolicyParams(kind="none", obs_dim=obs_dim, layer_sizes=(obs_dim, action_dim), theta=np.zeros(0))


def linear_policy(weight: Any, bias: Any) -> PolicyParams:
    """Unsquashed affine feedback `a = W s + b`."""
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    bias = np.asarray(bias, dtype=float).reshape(-1)
    n_out, n_in = weight.shape
    return PolicyParams(
        kind="linear",
        obs_dim=n_in,
        layer_sizes=(n_in, n_out),
        theta=np.concatenate([weight.reshape(-1), bias]),
    )


def constant_policy(obs_dim: int, action: Any) -> PolicyParams:
    """Open-loop constant action, stored as a linear policy with zero weights."""
    action = np.atleast_1d(np.asarray(action, dtype=float))
    return linear_policy(np.zeros((action.size, obs_dim)), action)


def mlp_policy(
    obs_dim: int,
    action_dim: int,
    hidden_sizes: tuple[int, ...] | list[int] = (64, 64),
    *,
    action_low: Any = None,
    action_high: Any = None,
    gaussian: bool = True,
    squash: bool = True,
    hidden_dim: int = 0,
    init_log_std: float = -1.0,
    init_action: Any = None,
    output_scale: float = 0.01,
    seed: int = 0,
) -> PolicyParams:
    """Randomly initialized tanh MLP.

    Weights are drawn from N(0, 1/fan_in); the output layer is scaled by
    `output_scale`. When `init_action` is given, the output bias is set so the
    initial mean action equals it.
    """
    rng = np.random.default_rng(seed)
    low = tuple(float(x) for x in np.atleast_1d(action_low)) if action_low is not None else None
    high = tuple(float(x) for x in np.atleast_1d(action_high)) if action_high is not None else None
    sizes = (obs_dim + hidden_dim, *hidden_sizes, action_dim)
    chunks: list[np.ndarray] = []
    if hidden_dim:
        chunks += [
            rng.standard_normal((hidden_dim, hidden_dim)) / math.sqrt(hidden_dim),
            rng.standard_normal((hidden_dim, obs_dim)) / math.sqrt(obs_dim),
            np.zeros(hidden_dim),
        ]
    n_layers = len(sizes) - 1
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
        w = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
        b = np.zeros(n_out)
        if k == n_layers - 1:
            w *= output_scale
            if init_action is not None:
                b = _preimage(np.atleast_1d(np.asarray(init_action, dtype=float)), low, high, squash=squash)
        chunks += [w.reshape(-1), b]
    if gaussian:
        chunks.append(np.full(action_dim, float(init_log_std)))

    return PolicyParams(
        kind="mlp",
        obs_dim=obs_dim,
        layer_sizes=sizes,
        theta=np.concatenate([c.reshape(-1) for c in chunks]),
        squash=squash,
        gaussian=gaussian,
        hidden_dim=hidden_dim,
        action_low=low,
        action_high=high,
    )


def _preimage(
    action: np.ndarray,
    low: tuple[float, ...] | None,
    high: tuple[float, ...] | None,
    *,
    squash: bool,
) -> np.ndarray:
    if not squash or low is None or high is None:
        return action
    lo = np.asarray(low)
    hi = np.asarray(high)
    unit = np.clip((action - 0.5 * (hi + lo)) / (0.5 * (hi - lo)), -0.999999, 0.999999)
    return np.arctanh(unit)


# Weight files ---------------------------------------------------------------


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_weights(params: PolicyParams) -> str:
    """Serialize a policy to the versioned structured-text weight format."""
    lines = [
        WEIGHTS_HEADER,
        f"format {WEIGHTS_FORMAT}",
        f"kind {params.kind}",
        f"activation {params.activation}",
        f"obs_dim {params.obs_dim}",
        f"layers {' '.join(str(n) for n in params.layer_sizes)}",
        f"hidden_dim {params.hidden_dim}",
        f"squash {str(params.squash).lower()}",
        f"gaussian {str(params.gaussian).lower()}",
    ]
    if params.action_low is not None and params.action_high is not None:
        lines.append(f"action_low {_fmt(np.asarray(params.action_low))}")
        lines.append(f"action_high {_fmt(np.asarray(params.action_high))}")
    lines.append(f"params {params.theta.size}")
    for name, (sl, shape) in _slices(params).items():
        block = params.theta[sl].reshape(shape)
        lines.append(f"array {name} {' '.join(str(n) for n in shape)}")
        if block.ndim == 1:
            lines.append(_fmt(block))
        else:
            lines.extend(_fmt(row) for row in block)
    return "\n".join(lines) + "\n"


def _floats(text: str, lineno: int) -> list[float]:
    try:
        return [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise WeightFileError(f"invalid number: {exc}", line=lineno) from exc


def _ints(text: str, lineno: int) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split())
    except ValueError as exc:
        raise WeightFileError(f"invalid integer: {exc}", line=lineno) from exc


def _bool(text: str, lineno: int) -> bool:
    if text not in {"true", "false"}:
        raise WeightFileError(f"expected true or false, found {text!r}", line=lineno)
    return text == "true"


def loads_weights(text: str) -> PolicyParams:
    """Parse the weight format written by `dumps_weights`."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != WEIGHTS_HEADER:
        raise WeightFileError(f"missing header {WEIGHTS_HEADER!r}", line=1)

    header: dict[str, tuple[str, int]] = {}
    arrays: list[tuple[str, tuple[int, ...], int]] = []
    rows: dict[str, list[tuple[list[float], int]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "array":
            parts = rest.split()
            if not parts:
                raise WeightFileError("array without a name", line=lineno)
            current = parts[0]
            arrays.append((current, _ints(" ".join(parts[1:]), lineno), lineno))
            rows[current] = []
        elif current is not None:
            rows[current].append((_floats(line, lineno), lineno))
        elif key in header:
            raise WeightFileError(f"duplicate key {key!r}", line=lineno)
        else:
            header[key] = (rest.strip(), lineno)

    def get(key: str, default: str | None = None) -> tuple[str, int]:
        if key in header:
            return header[key]
        if default is None:
            raise WeightFileError(f"missing key {key!r}", line=len(lines))
        return default, 0

    fmt, ln = get("format")
    if fmt != str(WEIGHTS_FORMAT):
        raise WeightFileError(f"unsupported format version {fmt!r}", line=ln)
    kind, ln = get("kind")
    if kind not in {"none", "linear", "mlp"}:
        raise WeightFileError(f"unknown policy kind {kind!r}", line=ln)
    activation, ln = get("activation", "tanh")
    if activation != "tanh":
        raise WeightFileError(f"unknown activation {activation!r}", line=ln)
    layers = _ints(*get("layers"))
    hidden_dim = _ints(*get("hidden_dim", "0"))
    if len(layers) < MIN_LAYERS or len(hidden_dim) != 1:
        raise WeightFileError("malformed layers or hidden_dim", line=get("layers")[1])
    obs_dim = _ints(*get("obs_dim", str(layers[0] - hidden_dim[0])))
    squash = _bool(*get("squash", "false"))
    gaussian = _bool(*get("gaussian", "false"))
    low = tuple(_floats(*header["action_low"])) if "action_low" in header else None
    high = tuple(_floats(*header["action_high"])) if "action_high" in header else None
    if len(obs_dim) != 1:
        raise WeightFileError("malformed obs_dim", line=get("obs_dim", "0")[1])

    expected_layout = _layout_for(kind, obs_dim[0], layers, hidden_dim[0], gaussian=gaussian)
    expected = sum(math.prod(shape) for _, shape in expected_layout)
    if "params" in header:
        declared = _ints(*header["params"])
        if declared != (expected,):
            raise WeightFileError(
                f"expected {expected} parameters, found {declared[0] if declared else 'none'}",
                line=header["params"][1],
            )

    if [name for name, _, _ in arrays] != [name for name, _ in expected_layout]:
        found = sum(math.prod(shape) for _, shape, _ in arrays)
        raise WeightFileError(
            f"expected arrays {[n for n, _ in expected_layout]} ({expected} parameters), "
            f"found {[n for n, _, _ in arrays]} ({found} parameters)",
            line=arrays[0][2] if arrays else len(lines),
        )

    chunks: list[np.ndarray] = []
    for (name, shape, ln_array), (_, want) in zip(arrays, expected_layout, strict=True):
        if shape != want:
            raise WeightFileError(f"array {name} has shape {shape}, expected {want}", line=ln_array)
        data = rows[name]
        n_rows = 1 if len(shape) == 1 else shape[0]
        n_cols = shape[-1]
        if len(data) != n_rows:
            raise WeightFileError(f"array {name} expects {n_rows} rows, found {len(data)}", line=ln_array)
        for values, ln_row in data:
            if len(values) != n_cols:
                raise WeightFileError(f"array {name} expects {n_cols} values per row, found {len(values)}", line=ln_row)
        chunks.append(np.array([v for values, _ in data for v in values], dtype=float))

    try:
        return PolicyParams(
            kind=kind,  # type: ignore[arg-type]
            obs_dim=obs_dim[0],
            layer_sizes=layers,
            theta=np.concatenate(chunks) if chunks else np.zeros(0),
            activation="tanh",
            squash=squash,
            gaussian=gaussian,
            hidden_dim=hidden_dim[0],
            action_low=low,
            action_high=high,
        )
    except PolicyError as exc:
        raise WeightFileError(str(exc), line=1) from exc


def save_weights(params: PolicyParams, path: Path) -> None:
    """Write a policy weight file."""
    Path(path).write_text(dumps_weights(params), encoding="utf-8")
    logger.debug("Saved %s policy (%d parameters) to %s", params.kind, params.theta.size, path)


def load_weights(path: Path) -> PolicyParams:
    """Read a policy weight file."""
    return loads_weights(Path(path).read_text(encoding="utf-8"))
