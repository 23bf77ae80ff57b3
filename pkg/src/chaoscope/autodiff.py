"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tape` is an append-only list of nodes. Each node keeps its cached value,
the indices of its operands and a vector-Jacobian product closure. Because
nodes are appended in evaluation order the tape is always topologically
sorted, and `Tape.backward` visits every node reachable from the loss exactly
once in a single reverse sweep.

Shapes must match exactly in elementwise operations. The only implicit
broadcast is a plain Python scalar operand, which acts as a constant. Row-wise
broadcasting is spelled out with `add_row`, `affine` and `broadcast_to`.

The module-level functions (`tanh`, `sin`, `stack`, ...) dispatch on their
argument: given numpy arrays they compute with numpy, given `Var` nodes they
record on the tape. Dynamics and policies are written once against these
functions and serve both plain simulation and differentiation.
"""

from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from numbers import Real
from typing import Any

import numpy as np

type Array = np.ndarray
type VJP = Callable[[Array], tuple[Array | None, ...]]

MATRIX_NDIM = 2
SQUARE_EXPONENT = 2.0


class ShapeError(ValueError):
    """Operand shapes do not match."""


@dataclass(slots=True)
class _Node:
    op: str
    value: Array
    parents: tuple[int, ...]
    vjp: VJP | None


class Gradients:
    """Result of a backward sweep."""

    def __init__(self, tape: "Tape", grads: list[Array | None]) -> None:
        """Wrap the per-node gradient list produced by `Tape.backward`."""
        self._tape = tape
        self._grads = grads

    def wrt(self, var: "Var") -> Array:
        """Gradient of the loss with respect to `var` (zeros if unreachable)."""
        if var.tape is not self._tape:
            msg = "variable belongs to a different tape"
            raise ValueError(msg)
        g = self._grads[var.index] if var.index < len(self._grads) else None
        if g is None:
            return np.zeros_like(var.value)
        return np.array(g, dtype=float).reshape(var.shape)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self) -> None:
        """Create an empty tape."""
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value: Any) -> "Var":
        """Record a leaf whose gradient is wanted."""
        return self._push("variable", _as_array(value), (), None)

    def constant(self, value: Any) -> "Var":
        """Record a leaf that never receives gradient."""
        return self._push("constant", _as_array(value), (), None)

    def backward(self, loss: "Var") -> Gradients:
        """Run reverse-mode accumulation from a scalar loss node."""
        if loss.tape is not self:
            msg = "loss belongs to a different tape"
            raise ValueError(msg)
        if loss.shape != ():
            msg = f"loss must be a scalar node, got shape {loss.shape}"
            raise ShapeError(msg)

        grads: list[Array | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones(())
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self._nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g), strict=True):
                if pg is None:
                    continue
                prev = grads[parent]
                grads[parent] = pg if prev is None else prev + pg
        return Gradients(self, grads)

    def _push(self, op: str, value: Array, parents: tuple[int, ...], vjp: VJP | None) -> "Var":
        self._nodes.append(_Node(op, value, parents, vjp))
        return Var(self, len(self._nodes) - 1)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("index", "tape")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: Tape, index: int) -> None:
        """Bind the handle to node `index` of `tape`."""
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        """Cached forward value."""
        return self.tape._nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the forward value."""
        return self.value.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions of the forward value."""
        return self.value.ndim

    @property
    def T(self) -> "Var":  # noqa: N802
        """Transpose of a 2-D node."""
        return transpose(self)

    def __repr__(self) -> str:
        op = self.tape._nodes[self.index].op
        return f"Var(op={op!r}, shape={self.shape})"

    def __len__(self) -> int:
        return self.shape[0]

    def __iter__(self) -> Iterator["Var"]:
        for i in range(len(self)):
            yield self[i]

    def __add__(self, other: Any) -> "Var":
        return add(self, other)

    def __radd__(self, other: Any) -> "Var":
        return add(other, self)

    def __sub__(self, other: Any) -> "Var":
        return subtract(self, other)

    def __rsub__(self, other: Any) -> "Var":
        return subtract(other, self)

    def __mul__(self, other: Any) -> "Var":
        return multiply(self, other)

    def __rmul__(self, other: Any) -> "Var":
        return multiply(other, self)

    def __truediv__(self, other: Any) -> "Var":
        return divide(self, other)

    def __rtruediv__(self, other: Any) -> "Var":
        return divide(other, self)

    def __neg__(self) -> "Var":
        return _unary("neg", self, np.negative, lambda g, _x, _y: -g)

    def __pow__(self, exponent: float) -> "Var":
        return power(self, exponent)

    def __matmul__(self, other: Any) -> "Var":
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Var":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Var":
        return _getitem(self, index)

    def sum(self, axis: int | None = None) -> "Var":
        """Sum over `axis` (all axes when None)."""
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> "Var":
        """Mean over `axis` (all axes when None)."""
        return mean(self, axis)


def _as_array(value: Any) -> Array:
    return np.array(value, dtype=float)


def value_of(x: Any) -> Array:
    """Forward value of a node, or the argument itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def is_var(*xs: Any) -> bool:
    """Whether any argument is a tape node."""
    return any(isinstance(x, Var) for x in xs)


def _tape_of(xs: Sequence[Any]) -> Tape:
    tapes = {id(x.tape): x.tape for x in xs if isinstance(x, Var)}
    if len(tapes) != 1:
        msg = "operands must live on exactly one tape"
        raise ValueError(msg)
    return next(iter(tapes.values()))


def _operand(x: Any, shape: tuple[int, ...], op: str) -> tuple[Array, int | None]:
    if isinstance(x, Var):
        if x.shape != shape:
            msg = f"{op}: shape mismatch {x.shape} vs {shape}"
            raise ShapeError(msg)
        return x.value, x.index
    if isinstance(x, Real):
        return np.asarray(float(x)), None
    arr = _as_array(x)
    if arr.shape != shape:
        msg = f"{op}: shape mismatch {arr.shape} vs {shape}"
        raise ShapeError(msg)
    return arr, None


def _binary(
    op: str,
    a: Any,
    b: Any,
    fwd: Callable[[Array, Array], Array],
    grad_a: Callable[[Array, Array, Array], Array],
    grad_b: Callable[[Array, Array, Array], Array],
) -> Var:
    tape = _tape_of((a, b))
    shape = a.shape if isinstance(a, Var) else b.shape
    va, ia = _operand(a, shape, op)
    vb, ib = _operand(b, shape, op)
    out = fwd(va, vb)
    parents = tuple(i for i in (ia, ib) if i is not None)
    rules = [r for r, i in ((grad_a, ia), (grad_b, ib)) if i is not None]

    def vjp(g: Array) -> tuple[Array | None, ...]:
        return tuple(np.broadcast_to(r(g, va, vb), shape) for r in rules)

    return tape._push(op, out, parents, vjp)


def add(a: Any, b: Any) -> Any:
    """Elementwise sum."""
    if not is_var(a, b):
        return np.add(a, b)
    return _binary("add", a, b, np.add, lambda g, _a, _b: g, lambda g, _a, _b: g)


def subtract(a: Any, b: Any) -> Any:
    """Elementwise difference."""
    if not is_var(a, b):
        return np.subtract(a, b)
    return _binary("sub", a, b, np.subtract, lambda g, _a, _b: g, lambda g, _a, _b: -g)


def multiply(a: Any, b: Any) -> Any:
    """Elementwise product."""
    if not is_var(a, b):
        return np.multiply(a, b)
    return _binary("mul", a, b, np.multiply, lambda g, _a, vb: g * vb, lambda g, va, _b: g * va)


def divide(a: Any, b: Any) -> Any:
    """Elementwise quotient."""
    if not is_var(a, b):
        return np.divide(a, b)
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, _a, vb: g / vb,
        lambda g, va, vb: -g * va / (vb * vb),
    )


def _unary(op: str, x: Var, fwd: Callable[[Array], Array], rule: Callable[[Array, Array, Array], Array]) -> Var:
    vx = x.value
    out = fwd(vx)

    def vjp(g: Array) -> tuple[Array | None, ...]:
        return (rule(g, vx, out),)

    return x.tape._push(op, out, (x.index,), vjp)


def tanh(x: Any) -> Any:
    """Hyperbolic tangent."""
    if not isinstance(x, Var):
        return np.tanh(x)
    return _unary("tanh", x, np.tanh, lambda g, _x, y: g * (1.0 - y * y))


def exp(x: Any) -> Any:
    """Exponential."""
    if not isinstance(x, Var):
        return np.exp(x)
    return _unary("exp", x, np.exp, lambda g, _x, y: g * y)


def log(x: Any) -> Any:
    """Natural logarithm."""
    if not isinstance(x, Var):
        return np.log(x)
    return _unary("log", x, np.log, lambda g, vx, _y: g / vx)


def sin(x: Any) -> Any:
    """Sine."""
    if not isinstance(x, Var):
        return np.sin(x)
    return _unary("sin", x, np.sin, lambda g, vx, _y: g * np.cos(vx))


def cos(x: Any) -> Any:
    """Cosine."""
    if not isinstance(x, Var):
        return np.cos(x)
    return _unary("cos", x, np.cos, lambda g, vx, _y: -g * np.sin(vx))


def square(x: Any) -> Any:
    """Elementwise square."""
    if not isinstance(x, Var):
        return np.square(x)
    return _unary("square", x, np.square, lambda g, vx, _y: 2.0 * g * vx)


def power(x: Any, exponent: float) -> Any:
    """Elementwise power with a constant exponent."""
    if not isinstance(x, Var):
        return np.power(x, exponent)
    if exponent == SQUARE_EXPONENT:
        return square(x)
    return _unary("pow", x, lambda v: np.power(v, exponent), lambda g, vx, _y: g * exponent * np.power(vx, exponent - 1))


def sigmoid(x: Any) -> Any:
    """Logistic sigmoid."""

    def fwd(v: Array) -> Array:
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=float))
    return _unary("sigmoid", x, fwd, lambda g, _x, y: g * y * (1.0 - y))


def absolute(x: Any) -> Any:
    """Absolute value; the derivative at 0 is taken from the right (+1)."""
    if not isinstance(x, Var):
        return np.abs(x)
    return _unary("abs", x, np.abs, lambda g, vx, _y: g * np.where(vx >= 0.0, 1.0, -1.0))


def stop_gradient(x: Any) -> Any:
    """Copy of `x` that blocks every gradient path through it."""
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float)
    return x.tape._push("stop_gradient", x.value.copy(), (), None)


def clip(x: Any, low: Any, high: Any) -> Any:
    """Clamp to [low, high]; gradient is zero where the clamp is active."""
    if not isinstance(x, Var):
        return np.clip(x, low, high)
    lo = np.asarray(low, dtype=float)
    hi = np.asarray(high, dtype=float)
    vx = x.value
    out = np.clip(vx, lo, hi)
    if out.shape != vx.shape:
        msg = f"clip: bounds {lo.shape}/{hi.shape} would broadcast {vx.shape}"
        raise ShapeError(msg)
    mask = ((vx > lo) & (vx < hi)).astype(float)
    return x.tape._push("clip", out, (x.index,), lambda g: (g * mask,))


def affine(x: Any, scale: Any, offset: Any) -> Any:
    """Compute `x * scale + offset` with constant `scale`/`offset` broadcast along trailing axes."""
    s = np.asarray(scale, dtype=float)
    o = np.asarray(offset, dtype=float)
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float) * s + o
    vx = x.value
    out = vx * s + o
    if out.shape != vx.shape:
        msg = f"affine: constants {s.shape}/{o.shape} would broadcast {vx.shape}"
        raise ShapeError(msg)
    return x.tape._push("affine", out, (x.index,), lambda g: (g * s,))


def add_row(x: Any, row: Any) -> Any:
    """Add a vector to every row of `x` (last axes must match)."""
    if not is_var(x, row):
        return np.asarray(x, dtype=float) + np.asarray(row, dtype=float)
    tape = _tape_of((x, row))
    vx, ix = (x.value, x.index) if isinstance(x, Var) else (_as_array(x), None)
    vr, ir = (row.value, row.index) if isinstance(row, Var) else (_as_array(row), None)
    if vr.ndim != 1 or vx.shape[-1:] != vr.shape:
        msg = f"add_row: row {vr.shape} does not match trailing axis of {vx.shape}"
        raise ShapeError(msg)
    out = vx + vr
    parents = tuple(i for i in (ix, ir) if i is not None)

    def vjp(g: Array) -> tuple[Array | None, ...]:
        grads: list[Array] = []
        if ix is not None:
            grads.append(g)
        if ir is not None:
            grads.append(g.reshape(-1, vr.shape[0]).sum(axis=0))
        return tuple(grads)

    return tape._push("add_row", out, parents, vjp)


def broadcast_to(x: Any, shape: tuple[int, ...]) -> Any:
    """Repeat `x` along new leading axes."""
    if not isinstance(x, Var):
        return np.broadcast_to(np.asarray(x, dtype=float), shape).copy()
    if tuple(shape[len(shape) - x.ndim :]) != x.shape:
        msg = f"broadcast_to: {x.shape} is not a trailing block of {shape}"
        raise ShapeError(msg)
    xshape = x.shape
    out = np.broadcast_to(x.value, shape).copy()
    return x.tape._push("broadcast", out, (x.index,), lambda g: (g.reshape(-1, *xshape).sum(axis=0),))


def matmul(a: Any, b: Any) -> Any:
    """Matrix product for 1-D and 2-D operands."""
    if not is_var(a, b):
        return np.matmul(a, b)
    tape = _tape_of((a, b))
    va, ia = (a.value, a.index) if isinstance(a, Var) else (_as_array(a), None)
    vb, ib = (b.value, b.index) if isinstance(b, Var) else (_as_array(b), None)
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2):
        msg = f"matmul supports 1-D and 2-D operands, got {va.shape} @ {vb.shape}"
        raise ShapeError(msg)
    try:
        out = va @ vb
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def grad_a(g: Array) -> Array:
        if vb.ndim == 1:
            return np.outer(g, vb) if va.ndim == MATRIX_NDIM else g * vb
        return g @ vb.T

    def grad_b(g: Array) -> Array:
        if va.ndim == 1:
            return np.outer(va, g) if vb.ndim == MATRIX_NDIM else g * va
        return va.T @ g

    parents = tuple(i for i in (ia, ib) if i is not None)
    rules = [r for r, i in ((grad_a, ia), (grad_b, ib)) if i is not None]
    return tape._push("matmul", out, parents, lambda g: tuple(r(g) for r in rules))


def transpose(x: Any) -> Any:
    """Transpose of a 2-D operand."""
    if not isinstance(x, Var):
        return np.asarray(x).T
    return _unary("transpose", x, lambda v: v.T, lambda g, _x, _y: g.T)


def reshape(x: Any, shape: tuple[int, ...]) -> Any:
    """Reshape without copying semantics."""
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    xshape = x.shape
    return _unary("reshape", x, lambda v: v.reshape(shape), lambda g, _x, _y: g.reshape(xshape))


def _getitem(x: Var, index: Any) -> Var:
    vx = x.value
    out = np.array(vx[index], dtype=float)

    def vjp(g: Array) -> tuple[Array | None, ...]:
        full = np.zeros_like(vx)
        full[index] += g
        return (full,)

    return x.tape._push("getitem", out, (x.index,), vjp)


def _expand(g: Array, shape: tuple[int, ...], axis: int | None) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_(x: Any, axis: int | None = None) -> Any:
    """Sum over `axis` (all axes when None)."""
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    shape = x.shape
    return _unary("sum", x, lambda v: np.asarray(np.sum(v, axis=axis)), lambda g, _x, _y: _expand(g, shape, axis))


def mean(x: Any, axis: int | None = None) -> Any:
    """Mean over `axis` (all axes when None)."""
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    shape = x.shape
    count = x.value.size if axis is None else shape[axis]
    return _unary(
        "mean",
        x,
        lambda v: np.asarray(np.mean(v, axis=axis)),
        lambda g, _x, _y: _expand(g, shape, axis) / count,
    )


def variance(x: Any, axis: int | None = None) -> Any:
    """Population variance (1/n normaliser) over `axis`."""
    if not isinstance(x, Var):
        return np.var(x, axis=axis)
    shape = x.shape
    count = x.value.size if axis is None else shape[axis]

    def rule(g: Array, vx: Array, _y: Array) -> Array:
        centred = vx - np.mean(vx, axis=axis, keepdims=True)
        return _expand(g, shape, axis) * (2.0 / count) * centred

    return _unary("variance", x, lambda v: np.asarray(np.var(v, axis=axis)), rule)


def stack(items: Sequence[Any], axis: int = -1) -> Any:
    """Stack equally shaped operands along a new axis."""
    if not is_var(*items):
        return np.stack([np.asarray(i, dtype=float) for i in items], axis=axis)
    tape = _tape_of(items)
    shape = next(i.shape for i in items if isinstance(i, Var))
    pairs = [_operand(i, shape, "stack") for i in items]
    values = [np.broadcast_to(v, shape) for v, _ in pairs]
    out = np.stack(values, axis=axis)
    slots = [k for k, (_, idx) in enumerate(pairs) if idx is not None]
    parents = tuple(pairs[k][1] for k in slots)  # type: ignore[misc]
    return tape._push("stack", out, parents, lambda g: tuple(np.take(g, k, axis=axis) for k in slots))


def concat(items: Sequence[Any], axis: int = -1) -> Any:
    """Concatenate operands along an existing axis."""
    if not is_var(*items):
        return np.concatenate([np.asarray(i, dtype=float) for i in items], axis=axis)
    tape = _tape_of(items)
    values = [value_of(i) for i in items]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    slots = [k for k, i in enumerate(items) if isinstance(i, Var)]
    parents = tuple(items[k].index for k in slots)

    def vjp(g: Array) -> tuple[Array | None, ...]:
        pieces = np.split(g, bounds, axis=axis)
        return tuple(pieces[k] for k in slots)

    return tape._push("concat", out, parents, vjp)


def backward(tape: Tape, loss: Var) -> Gradients:
    """Reverse-mode gradients of a scalar `loss` recorded on `tape`."""
    return tape.backward(loss)


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    index: tuple[int, ...]
    analytic: Array
    numeric: Array


def _evaluate(fn: Callable[[Var], Var], params: Array) -> float:
    tape = Tape()
    return float(fn(tape.variable(params)).value)


def grad_check(
    fn: Callable[[Var], Var],
    params: Any,
    h: float = 1e-5,
    *,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences.

    Args:
        fn: Builds a scalar loss from a parameter node; must be deterministic.
        params: Point at which to compare.
        h: Central-difference step.
        floor: Lower bound of the relative-error denominator.

    Returns:
        Worst per-coordinate relative error and where it occurs. Kinks such
        as `absolute` at 0 show up as a large error, since the tape uses a
        one-sided derivative while the central difference averages both sides.
    """
    point = _as_array(params)
    tape = Tape()
    theta = tape.variable(point)
    analytic = tape.backward(fn(theta)).wrt(theta)

    numeric = np.empty_like(point)
    for idx in np.ndindex(point.shape):
        plus = point.copy()
        minus = point.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (_evaluate(fn, plus) - _evaluate(fn, minus)) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheckResult(
        max_rel_error=float(rel[worst]) if rel.size else 0.0,
        index=tuple(int(i) for i in worst),
        analytic=analytic,
        numeric=numeric,
    )
