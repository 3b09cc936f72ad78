"""Reverse-mode differentiation on a numpy-backed tape.

Every primitive in this module accepts either plain numpy values or
:class:`Var` objects.  Plain inputs run straight numpy code; as soon as one
operand is a ``Var`` the result is recorded on that operand's tape together
with a vector-Jacobian product for each parent.  Because both paths execute
the same numpy calls in the same order, a taped forward pass returns exactly
the value of the untaped one.

Example::

    loss, tape = forward(lambda p: ad.sum(p["x"] * p["x"]), {"x": np.array([3.0])})
    report = backward(tape)
    report.grads["x"]   # array([6.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class AutodiffError(RuntimeError):
    """Base class for tape failures."""


class DomainError(AutodiffError):
    """An operand is outside the domain of a primitive (log, division)."""

    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message if node_index is None else f"{message} (node {node_index})")
        self.node_index = node_index


class TapeStateError(AutodiffError):
    """Backward requested on a tape without a completed forward pass."""


class EvaluationError(AutodiffError):
    """Loss evaluated to a non-finite value during a gradient check."""


class Tape:
    """Append-only record of primitive applications.

    Node ``i`` stores its op kind, the indices of its parents (always ``< i``),
    its value and a function mapping the output cotangent to one cotangent per
    parent.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self._vjps: list[Callable | None] = []
        self.leaves: dict[str, int] = {}
        self.output: int | None = None
        # sign patterns of piecewise-linear nodes, used to detect kink crossings
        self.kinks: list[np.ndarray] = []

    def __len__(self):
        return len(self.ops)

    @property
    def next_index(self) -> int:
        return len(self.ops)

    def push(self, op: str, value, parents: tuple["Var", ...] = (), vjp=None) -> "Var":
        for p in parents:
            if p.tape is not self:
                raise AutodiffError("operands belong to different tapes")
        idx = len(self.ops)
        self.ops.append(op)
        self.parents.append(tuple(p.index for p in parents))
        self.values.append(value)
        self._vjps.append(vjp)
        return Var(value, self, idx)

    def leaf(self, name: str, value) -> "Var":
        var = self.push("leaf", np.asarray(value))
        self.leaves[name] = var.index
        return var


class Var:
    """A value living on a tape."""

    __slots__ = ("value", "tape", "index")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _as_var(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.push("const", np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a, b, out, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return out
    va, vb = _as_var(a, tape), _as_var(b, tape)
    sa, sb = np.shape(va.value), np.shape(vb.value)

    def vjp(g):
        return _unbroadcast(vjp_a(g), sa), _unbroadcast(vjp_b(g), sb)

    return tape.push(op, out, (va, vb), vjp)


def _unary(op: str, x, out, vjp_x):
    if not isinstance(x, Var):
        return out
    return x.tape.push(op, out, (x,), lambda g: (vjp_x(g),))


# ---------------------------------------------------------------- primitives


def add(a, b):
    out = value_of(a) + value_of(b)
    return _binary("add", a, b, out, lambda g: g, lambda g: g)


def sub(a, b):
    out = value_of(a) - value_of(b)
    return _binary("sub", a, b, out, lambda g: g, lambda g: -g)


def mul(a, b):
    xa, xb = value_of(a), value_of(b)
    out = xa * xb
    return _binary("mul", a, b, out, lambda g: g * xb, lambda g: g * xa)


def div(a, b):
    xa, xb = value_of(a), value_of(b)
    if np.any(np.asarray(xb) == 0):
        tape = _tape_of(a, b)
        raise DomainError("division by zero", tape.next_index if tape else None)
    out = xa / xb
    return _binary("div", a, b, out, lambda g: g / xb, lambda g: -g * xa / (xb * xb))


def neg(x):
    return _unary("neg", x, -value_of(x), lambda g: -g)


def exp(x):
    out = np.exp(value_of(x))
    return _unary("exp", x, out, lambda g: g * out)


def log(x):
    v = value_of(x)
    if np.any(np.asarray(v) <= 0):
        tape = _tape_of(x)
        raise DomainError("log of non-positive value", tape.next_index if tape else None)
    return _unary("log", x, np.log(v), lambda g: g / v)


def xlogx(x):
    """Elementwise ``x * log(x)`` with ``0 * log 0 = 0``; requires ``x >= 0``."""
    v = np.asarray(value_of(x))
    if np.any(v < 0):
        tape = _tape_of(x)
        raise DomainError("xlogx of negative value", tape.next_index if tape else None)
    pos = v > 0
    safe = np.where(pos, v, 1.0)
    out = np.where(pos, v * np.log(safe), 0.0)
    # derivative log(x) + 1 is unbounded at 0; use 0 there (no mass, no signal)
    return _unary("xlogx", x, out, lambda g: g * np.where(pos, np.log(safe) + 1.0, 0.0))


def relu(x):
    v = value_of(x)
    out = np.maximum(v, 0.0)
    if not isinstance(x, Var):
        return out
    on = v > 0  # derivative at exactly 0 is 0
    x.tape.kinks.append(on)
    return x.tape.push("relu", out, (x,), lambda g: (g * on,))


def leaky_relu(x, slope: float):
    v = value_of(x)
    on = v >= 0
    out = np.where(on, v, slope * v)
    if not isinstance(x, Var):
        return out
    x.tape.kinks.append(on)
    return x.tape.push("leaky_relu", out, (x,), lambda g: (np.where(on, g, slope * g),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    v = value_of(x)
    out = np.sum(v, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = np.shape(v)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.push("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    v = value_of(x)
    n = np.size(v) if axis is None else np.prod([np.shape(v)[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def amax(x, axis=None, keepdims=False):
    """Max reduction; the cotangent goes to the first maximal entry."""
    v = value_of(x)
    out = np.max(v, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = np.shape(v)

    def vjp(g):
        if axis is None:
            mask = np.zeros(np.size(v), dtype=bool)
            mask[np.argmax(v)] = True
            return (np.where(mask.reshape(shape), g, 0.0),)
        idx = np.expand_dims(np.argmax(v, axis=axis), axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=np.result_type(v, g))
        np.put_along_axis(full, idx, gk, axis=axis)
        return (full,)

    return x.tape.push("max", out, (x,), vjp)


def matmul(a, b):
    xa, xb = value_of(a), value_of(b)
    out = xa @ xb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    va, vb = _as_var(a, tape), _as_var(b, tape)
    sa, sb = np.shape(xa), np.shape(xb)
    if len(sa) < 2 or len(sb) < 2:
        raise ValueError("matmul on the tape requires operands with ndim >= 2")

    def vjp(g):
        ga = g @ np.swapaxes(xb, -1, -2)
        gb = np.swapaxes(xa, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return tape.push("matmul", out, (va, vb), vjp)


def transpose(x):
    out = np.swapaxes(value_of(x), -1, -2)
    return _unary("transpose", x, out, lambda g: np.swapaxes(g, -1, -2))


def reshape(x, shape):
    v = value_of(x)
    old = np.shape(v)
    return _unary("reshape", x, np.reshape(v, shape), lambda g: np.reshape(g, old))


def expand_dims(x, axis):
    v = value_of(x)
    return reshape(x, np.expand_dims(v, axis).shape)


def where(mask, a, b):
    """Select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value_of(a), value_of(b))
    return _binary(
        "where", a, b, out,
        lambda g: np.where(mask, g, 0.0),
        lambda g: np.where(mask, 0.0, g),
    )


# ---------------------------------------------------------------- driver


@dataclass
class GradientReport:
    grads: dict[str, np.ndarray]
    max_abs_gradient: float


def forward(fn: Callable[[dict], object], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on taped copies of ``params``.

    Returns ``(loss, tape)``; ``loss`` is a python float.
    """
    tape = Tape()
    leaves = {name: tape.leaf(name, value) for name, value in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        out = tape.push("const", np.asarray(out))
    if np.size(out.value) != 1:
        raise AutodiffError(f"loss must be a scalar, got shape {out.shape}")
    tape.output = out.index
    return float(np.asarray(out.value).reshape(())), tape


def backward(tape: Tape) -> GradientReport:
    if tape is None or tape.output is None:
        raise TapeStateError("backward called before a forward pass completed")
    grads: list[np.ndarray | None] = [None] * len(tape)
    out_val = tape.values[tape.output]
    grads[tape.output] = np.ones_like(np.asarray(out_val, dtype=float))
    for i in range(tape.output, -1, -1):
        g = grads[i]
        if g is None or tape._vjps[i] is None:
            continue
        for parent, pg in zip(tape.parents[i], tape._vjps[i](g)):
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    result = {}
    for name, idx in tape.leaves.items():
        g = grads[idx]
        shape = np.shape(tape.values[idx])
        result[name] = np.zeros(shape) if g is None else np.reshape(g, shape)
    max_abs = max((float(np.max(np.abs(g))) for g in result.values() if np.size(g)), default=0.0)
    return GradientReport(result, max_abs)


def grad(fn, params):
    """Convenience: ``(loss, grads)`` in one call."""
    loss, tape = forward(fn, params)
    return loss, backward(tape).grads


def _kink_pattern(fn, params) -> list[np.ndarray]:
    _, tape = forward(fn, params)
    return tape.kinks


def finite_diff_check(
    fn: Callable[[dict], object],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    kink_margin: float = 1e-4,
) -> float:
    """Largest relative error between tape gradients and central differences.

    Coordinates whose ``+-kink_margin`` perturbation flips the on/off pattern
    of a piecewise-linear node are skipped. The relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, tape = forward(fn, params)
    analytic = backward(tape).grads

    def evaluate(p):
        val = float(np.asarray(value_of(fn(p))).reshape(()))
        if not np.isfinite(val):
            raise EvaluationError("non-finite loss at a perturbed point")
        return val

    worst = 0.0
    for name, base in params.items():
        for pos in np.ndindex(base.shape):
            def shifted(delta):
                p = dict(params)
                arr = base.copy()
                arr[pos] += delta
                p[name] = arr
                return p

            if tape.kinks:
                lo, hi = _kink_pattern(fn, shifted(-kink_margin)), _kink_pattern(fn, shifted(kink_margin))
                if any(not np.array_equal(a, b) for a, b in zip(lo, hi)):
                    continue
            numeric = (evaluate(shifted(h)) - evaluate(shifted(-h))) / (2 * h)
            a = float(analytic[name][pos])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
