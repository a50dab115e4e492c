"""Define-by-run reverse-mode differentiation over small float64 arrays.

A :class:`Tape` records every operation as ``(kind, input ids, cached value,
attrs)``.  Backward rules live in the ``VJP`` table keyed by op kind, so a
single rule can be swapped out (the grad-check negative control does this).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    """Read-only float64 copy of ``x``; scalars become shape ``(1,)``."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite entries in tensor of shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.idx}, kind={self.tape.kinds[self.idx]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only computation record. Confined to one thread."""

    def __init__(self, strict: bool = True):
        # strict: reject non-finite values at every op. Fast mode leaves the check
        # to the caller, which suffices because non-finite values propagate.
        self.strict = strict
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[object] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.kinds)

    def _record(self, kind, inputs, value, attr=None) -> Var:
        if self.strict and not np.isfinite(value).all():
            shapes = [self.values[i].shape for i in inputs]
            raise NonFiniteError(f"{kind} produced non-finite output from inputs of shapes {shapes}")
        if self.strict:
            value.setflags(write=False)
        idx = len(self.kinds)
        self.kinds.append(kind)
        self.inputs.append(tuple(inputs))
        self.values.append(value)
        self.attrs.append(attr)
        return Var(self, idx, value)

    def constant(self, x) -> Var:
        if not self.strict and isinstance(x, np.ndarray) and x.dtype == np.float64 and 0 < x.ndim <= MAX_RANK:
            return self._record("leaf", (), x)
        return self._record("leaf", (), as_tensor(x).copy())

    def param(self, name: str, x) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        v = self.constant(x)
        self.params[name] = v.idx
        return v

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- forward ops ---------------------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return tape._record("add", (a.idx, b.idx), a.value + b.value)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return tape._record("sub", (a.idx, b.idx), a.value - b.value)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return tape._record("mul", (a.idx, b.idx), a.value * b.value)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale factor {c}")
    return a.tape._record("scale", (a.idx,), a.value * c, c)


def matmul(a, b) -> Var:
    """``(..., k) @ (k, n)`` with the left operand of rank 2 or 3."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.value.ndim not in (2, 3) or b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return tape._record("matmul", (a.idx, b.idx), a.value @ b.value)


def concat(xs: Sequence, axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            d1 != d2 for k, (d1, d2) in enumerate(zip(ref, x.shape)) if k != ax
        ):
            raise ShapeError(f"concat(axis={axis}): shapes {[x.shape for x in xs]}")
    sizes = [x.shape[ax] for x in xs]
    out = np.concatenate([x.value for x in xs], axis=ax)
    return tape._record("concat", tuple(x.idx for x in xs), out, (ax, sizes))


def slice_(x: Var, axis: int, start: int, stop: int) -> Var:
    ax = axis % x.value.ndim
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.value.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    return x.tape._record("slice", (x.idx,), x.value[idx].copy(), idx)


def sum_(x: Var, axis: int | None = None) -> Var:
    if axis is None:
        return x.tape._record("sum", (x.idx,), np.array([x.value.sum()]), None)
    if x.value.ndim == 1:
        raise ShapeError(f"sum over axis {axis} would reduce shape {x.shape} to rank 0")
    ax = axis % x.value.ndim
    return x.tape._record("sum", (x.idx,), x.value.sum(axis=ax), ax)


def mean(x: Var, axis: int | None = None) -> Var:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def square(x: Var) -> Var:
    return x.tape._record("square", (x.idx,), x.value * x.value)


def tanh(x: Var) -> Var:
    return x.tape._record("tanh", (x.idx,), np.tanh(x.value))


def sigmoid(x: Var) -> Var:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return x.tape._record("sigmoid", (x.idx,), out)


def relu(x: Var) -> Var:
    return x.tape._record("relu", (x.idx,), np.maximum(x.value, 0.0))


OP_KINDS = (
    "add", "sub", "mul", "scale", "matmul", "concat", "slice",
    "sum", "mean", "square", "tanh", "sigmoid", "relu",
)


# -- backward rules ------------------------------------------------------
# Each rule: (upstream grad, input values, output value, attr) -> input grads.

def _vjp_add(g, ins, out, attr):
    return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)


def _vjp_sub(g, ins, out, attr):
    return _unbroadcast(g, ins[0].shape), -_unbroadcast(g, ins[1].shape)


def _vjp_mul(g, ins, out, attr):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_scale(g, ins, out, c):
    return (g * c,)


def _vjp_matmul(g, ins, out, attr):
    a, b = ins
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _vjp_concat(g, ins, out, attr):
    ax, sizes = attr
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _vjp_slice(g, ins, out, idx):
    full = np.zeros_like(ins[0])
    full[idx] = g
    return (full,)


def _vjp_sum(g, ins, out, ax):
    x = ins[0]
    if ax is None:
        return (np.full_like(x, g[0]),)
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)


def _vjp_square(g, ins, out, attr):
    return (2.0 * ins[0] * g,)


def _vjp_tanh(g, ins, out, attr):
    return (g * (1.0 - out * out),)


def _vjp_sigmoid(g, ins, out, attr):
    return (g * out * (1.0 - out),)


def _vjp_relu(g, ins, out, attr):
    # subgradient 0 at the kink
    return (g * (ins[0] > 0.0),)


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "sum": _vjp_sum,
    "square": _vjp_square,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "relu": _vjp_relu,
}


def _reverse(tape: Tape, root: Var) -> list:
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.shape != (1,):
        raise ShapeError(f"backward needs a scalar root of shape (1,), got {root.shape}")
    grads: list = [None] * (root.idx + 1)
    grads[root.idx] = np.ones(1)
    kinds, inputs, values, attrs = tape.kinds, tape.inputs, tape.values, tape.attrs
    for k in range(root.idx, -1, -1):
        g = grads[k]
        if g is None or kinds[k] == "leaf":
            continue
        ins = inputs[k]
        parts = VJP[kinds[k]](g, [values[i] for i in ins], values[k], attrs[k])
        for i, gi in zip(ins, parts):
            grads[i] = gi if grads[i] is None else grads[i] + gi
    return grads


def backward(tape: Tape, root: Var) -> dict[str, np.ndarray]:
    """Gradient of ``root`` w.r.t. every registered parameter.

    Parameters off every path to ``root`` get exact zeros.
    """
    grads = _reverse(tape, root)
    out = {}
    for name, idx in tape.params.items():
        g = grads[idx] if idx < len(grads) else None
        out[name] = np.zeros_like(tape.values[idx]) if g is None else g
    return out


def grad_wrt(tape: Tape, root: Var, xs: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of ``root`` w.r.t. arbitrary nodes (inputs, intermediates)."""
    grads = _reverse(tape, root)
    res = []
    for x in xs:
        g = grads[x.idx] if x.idx < len(grads) else None
        res.append(np.zeros_like(x.value) if g is None else g)
    return res


# -- verification --------------------------------------------------------

def rel_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    flagged: list[tuple[str, tuple, float]]
    tol: float
    nonfinite: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flagged and not self.nonfinite

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.max_rel_err.items()]
        for name in self.nonfinite:
            lines.append(f"{name}: NON-FINITE")
        lines.append(f"{'PASS' if self.ok else 'FAIL'} (tol {self.tol:g}, worst {self.worst:.3e}, "
                     f"{len(self.flagged)} flagged)")
        return "\n".join(lines)


def grad_check(fn: Callable[[Tape, dict], Var], params: Mapping[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences, entry by entry.

    ``fn(tape, vars)`` must build a scalar from the registered parameter vars.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(p):
        tape = Tape()
        pv = {k: tape.param(k, v) for k, v in p.items()}
        return tape, fn(tape, pv)

    errs, flagged, nonfinite = {}, [], []
    try:
        tape, root = evaluate(params)
        analytic = backward(tape, root)
    except NonFiniteError:
        return GradCheckReport({k: float("inf") for k in params}, [], tol, list(params))

    for name, base in params.items():
        numeric = np.zeros_like(base)
        bad = False
        for ix in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = dict(params)
                arr = base.copy()
                arr[ix] += sign * h
                p[name] = arr
                try:
                    vals.append(evaluate(p)[1].value[0])
                except NonFiniteError:
                    bad = True
                    vals.append(np.nan)
            numeric[ix] = (vals[0] - vals[1]) / (2.0 * h)
        if bad or not np.isfinite(numeric).all():
            nonfinite.append(name)
            errs[name] = float("inf")
            continue
        err = rel_error(analytic[name], numeric)
        errs[name] = float(err.max()) if err.size else 0.0
        for ix in zip(*np.nonzero(err > tol)):
            flagged.append((name, tuple(int(i) for i in ix), float(err[ix])))
    return GradCheckReport(errs, flagged, tol, nonfinite)


# -- optimiser -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              maximize: bool = False) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"no gradient for parameter {k!r}")
        if grads[k].shape != p.shape:
            raise ShapeError(f"adam: param {k!r} has shape {p.shape}, grad {grads[k].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for k, p in params.items():
        g = -grads[k] if maximize else grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
