"""Dense float64 tensors with a minimal scalar-rooted reverse-mode tape.

Every operation in this module returns a new immutable :class:`Tensor`. When a
:class:`Tape` is active and at least one input is watched by it, the operation
is appended to the tape together with the values its adjoint needs. Calling
:func:`backward` on a scalar result walks the tape in reverse and returns a
:class:`Gradients` map.

Adjoint rules live in the module-level ``ADJOINTS`` registry, keyed by op kind,
so verification code can swap a rule out (see :func:`corrupt_adjoint`).
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, TapeError

# Inputs in [1 - ARCCOSH_CLAMP, 1) are snapped to 1; anything lower is a domain error.
ARCCOSH_CLAMP = 1e-6
# Series branches for the two removable singularities.
SINHC_SERIES_BELOW = 1e-8  # s = t^2, i.e. t < 1e-4
SINHC_GRAD_SERIES_BELOW = 1e-4
ACOSH_RATIO_SERIES_BELOW = 1e-8  # u - 1

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Immutable float64 array, optionally bound to a node of the active tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, *, _check=True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __float__(self):
        return self.item()

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    # operator sugar
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

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(slots=True)
class Node:
    kind: str
    inputs: tuple  # node ids (or None for constants), aligned with values
    values: tuple  # forward input arrays
    out: np.ndarray
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of operations; use as a context manager.

    >>> with Tape() as tape:
    ...     x = tape.watch([1.0, 2.0])
    ...     y = sum_(square(x))
    >>> backward(y)[x]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.names: dict[int, str] = {}
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a leaf whose gradient :func:`backward` reports."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        t = Tensor(value.data if isinstance(value, Tensor) else value)
        t.node_id = self._append(Node("leaf", (), (), t.data))
        t.tape = self
        if name is not None:
            self.names[t.node_id] = name
        return t

    def _append(self, node: Node) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)
        return len(self.nodes) - 1


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def active_tape() -> Tape | None:
    return _ACTIVE.get()


class Gradients:
    """Adjoints by tape node; lookups for untouched tensors give zeros."""

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape | None):
        self._grads = grads
        self.tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node_id is not None and t.tape is self.tape and t.node_id in self._grads:
            return self._grads[t.node_id]
        return np.zeros(t.shape)

    def by_name(self) -> dict[str, np.ndarray]:
        if self.tape is None:
            return {}
        return {
            name: self._grads.get(nid, np.zeros(self.tape.nodes[nid].out.shape))
            for nid, name in self.tape.names.items()
        }


# ---------------------------------------------------------------------------
# recording machinery


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, saved: dict | None = None) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{kind}: produced non-finite values")
    t = Tensor(out, _check=False)
    tape = _ACTIVE.get()
    if tape is not None and any(x.tape is tape for x in inputs):
        ids = tuple(x.node_id if x.tape is tape else None for x in inputs)
        t.node_id = tape._append(Node(kind, ids, tuple(x.data for x in inputs), t.data, saved or {}))
        t.tape = tape
    return t


def _broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    # Trailing-dimension alignment with size-1 expansion; never reshapes.
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


ADJOINTS: dict[str, Callable[[np.ndarray, Node], tuple]] = {}


def adjoint(kind: str):
    def register(fn):
        ADJOINTS[kind] = fn
        return fn

    return register


@contextlib.contextmanager
def corrupt_adjoint(kind: str, factor: float = 1.01):
    """Temporarily scale the adjoint of ``kind`` by ``factor`` (verification hook)."""
    if kind not in ADJOINTS:
        raise KeyError(f"unknown op kind {kind!r}")
    original = ADJOINTS[kind]

    def broken(g, node):
        return tuple(None if x is None else factor * x for x in original(g, node))

    ADJOINTS[kind] = broken
    try:
        yield
    finally:
        ADJOINTS[kind] = original


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    return _record("add", (a, b), a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    return _record("sub", (a, b), a.data - b.data)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    return _record("mul", (a, b), a.data * b.data)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    return _record("div", (a, b), a.data / b.data)


@adjoint("add")
def _(g, node):
    return g, g


@adjoint("sub")
def _(g, node):
    return g, -g


@adjoint("mul")
def _(g, node):
    a, b = node.values
    return g * b, g * a


@adjoint("div")
def _(g, node):
    a, b = node.values
    return g / b, -g * a / (b * b)


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        return _record("exp", (a,), np.exp(a.data))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return _record("log", (a,), np.log(a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    return _record("sqrt", (a,), np.sqrt(a.data))


def sinh(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        return _record("sinh", (a,), np.sinh(a.data))


def cosh(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        return _record("cosh", (a,), np.cosh(a.data))


def arccosh(a) -> Tensor:
    """arccosh with rounding guard: inputs in [1 - 1e-6, 1) are treated as 1."""
    a = as_tensor(a)
    if np.any(a.data < 1.0 - ARCCOSH_CLAMP):
        raise DomainError(f"arccosh: argument {a.data.min():.3g} below 1 - {ARCCOSH_CLAMP:g}")
    u = np.maximum(a.data, 1.0)
    return _record("arccosh", (a,), np.arccosh(u), {"u": u})


def arcsin(a) -> Tensor:
    a = as_tensor(a)
    if np.any(np.abs(a.data) > 1):
        raise DomainError("arcsin: argument outside [-1, 1]")
    return _record("arcsin", (a,), np.arcsin(a.data))


def arccos(a) -> Tensor:
    a = as_tensor(a)
    if np.any(np.abs(a.data) > 1):
        raise DomainError("arccos: argument outside [-1, 1]")
    return _record("arccos", (a,), np.arccos(a.data))


def max0(a) -> Tensor:
    a = as_tensor(a)
    return _record("max0", (a,), np.maximum(a.data, 0.0))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data)


@adjoint("neg")
def _(g, node):
    return (-g,)


@adjoint("exp")
def _(g, node):
    return (g * node.out,)


@adjoint("log")
def _(g, node):
    return (g / node.values[0],)


@adjoint("sqrt")
def _(g, node):
    return (g / (2.0 * node.out),)


@adjoint("sinh")
def _(g, node):
    return (g * np.cosh(node.values[0]),)


@adjoint("cosh")
def _(g, node):
    return (g * np.sinh(node.values[0]),)


@adjoint("arccosh")
def _(g, node):
    u = node.saved["u"]
    # floor keeps the slope finite at the clamped point u == 1
    return (g / np.sqrt(np.maximum((u - 1.0) * (u + 1.0), 1e-30)),)


@adjoint("arcsin")
def _(g, node):
    a = node.values[0]
    return (g / np.sqrt(1.0 - a * a),)


@adjoint("arccos")
def _(g, node):
    a = node.values[0]
    return (-g / np.sqrt(1.0 - a * a),)


@adjoint("max0")
def _(g, node):
    return (g * (node.values[0] > 0),)


@adjoint("square")
def _(g, node):
    return (2.0 * g * node.values[0],)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sinh": sinh,
    "cosh": cosh,
    "arccosh": arccosh,
    "arcsin": arcsin,
    "arccos": arccos,
    "max0": max0,
    "square": square,
}
BINARY = frozenset({"add", "sub", "mul", "div"})


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ShapeError(f"{op_kind} takes one operand")
    return fn(a)


# ---------------------------------------------------------------------------
# smooth helpers used by the geometry and the experts


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes only where no clipping happened."""
    a = as_tensor(a)
    return _record("clamp", (a,), np.clip(a.data, lo, hi), {"lo": lo, "hi": hi})


@adjoint("clamp")
def _(g, node):
    a = node.values[0]
    return (g * ((a >= node.saved["lo"]) & (a <= node.saved["hi"])),)


def sinhc_sq(s) -> Tensor:
    """sinh(sqrt(s)) / sqrt(s) for s >= 0, smooth through s = 0.

    Taking the squared argument keeps the map differentiable at the origin, where
    the norm itself is not.
    """
    s = as_tensor(s)
    if np.any(s.data < 0):
        raise DomainError("sinhc_sq: negative argument")
    x = s.data
    small = x < SINHC_SERIES_BELOW
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t = np.sqrt(x)
        out = np.where(small, 1.0 + x / 6.0 + x * x / 120.0, np.sinh(t) / np.where(small, 1.0, t))
    return _record("sinhc_sq", (s,), out)


@adjoint("sinhc_sq")
def _(g, node):
    x = node.values[0]
    small = x < SINHC_GRAD_SERIES_BELOW
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t = np.sqrt(np.where(small, 1.0, x))
        closed = (t * np.cosh(t) - np.sinh(t)) / (2.0 * t * t * t)
    series = 1.0 / 6.0 + x / 60.0 + x * x / 1680.0 + x * x * x / 90720.0
    return (g * np.where(small, series, closed),)


def acosh_ratio(u) -> Tensor:
    """arccosh(u) / sqrt(u^2 - 1) for u >= 1, smooth through u = 1.

    Inputs below 1 are handled with the arccosh clamp policy.
    """
    u = as_tensor(u)
    if np.any(u.data < 1.0 - ARCCOSH_CLAMP):
        raise DomainError(f"acosh_ratio: argument {u.data.min():.3g} below 1 - {ARCCOSH_CLAMP:g}")
    x = np.maximum(u.data, 1.0)
    w = x - 1.0
    small = w < ACOSH_RATIO_SERIES_BELOW
    with np.errstate(invalid="ignore", divide="ignore"):
        closed = np.arccosh(x) / np.sqrt(w * (x + 1.0))
    out = np.where(small, 1.0 - w / 3.0 + 2.0 * w * w / 15.0, closed)
    return _record("acosh_ratio", (u,), out, {"u": x})


@adjoint("acosh_ratio")
def _(g, node):
    x = node.saved["u"]
    w = x - 1.0
    small = w < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(small, 1.0, w * (x + 1.0))
        # d/du [acosh(u) / r] = (1 - u * acosh(u) / r) / r^2
        closed = (1.0 - x * np.arccosh(x) / np.sqrt(r2)) / r2
    series = -1.0 / 3.0 + 4.0 * w / 15.0 - 6.0 * w * w / 35.0
    return (g * np.where(small, series, closed),)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("softplus", (a,), np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))


@adjoint("softplus")
def _(g, node):
    x = node.values[0]
    return (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)


def gelu(a) -> Tensor:
    from scipy.special import erf

    a = as_tensor(a)
    x = a.data
    return _record("gelu", (a,), 0.5 * x * (1.0 + erf(x / np.sqrt(2.0))))


@adjoint("gelu")
def _(g, node):
    from scipy.special import erf

    x = node.values[0]
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (g * (cdf + x * pdf),)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data)


@adjoint("matmul")
def _(g, node):
    a, b = node.values
    return g @ b.T, a.T @ g


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), {"axis": axis, "keepdims": keepdims})


@adjoint("sum")
def _(g, node):
    shape = node.values[0].shape
    axis = node.saved["axis"]
    if axis is not None and not node.saved["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record("reshape", (a,), out)


@adjoint("reshape")
def _(g, node):
    return (g.reshape(node.values[0].shape),)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _record("transpose", (a,), a.data.T.copy())


@adjoint("transpose")
def _(g, node):
    return (g.T,)


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters back with accumulation."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as e:
        raise ShapeError(str(e)) from None
    return _record("index", (a,), np.array(out), {"key": key})


@adjoint("index")
def _(g, node):
    z = np.zeros(node.values[0].shape)
    np.add.at(z, node.saved["key"], g)
    return (z,)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [t.shape[axis] for t in ts]
    return _record("concat", ts, out, {"axis": axis, "splits": np.cumsum(sizes)[:-1]})


@adjoint("concat")
def _(g, node):
    return tuple(np.split(g, node.saved["splits"], axis=node.saved["axis"]))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _record("softmax", (x,), e / e.sum(axis=axis, keepdims=True), {"axis": axis})


@adjoint("softmax")
def _(g, node):
    s = node.out
    return (s * (g - np.sum(g * s, axis=node.saved["axis"], keepdims=True)),)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _record("log_softmax", (x,), out, {"axis": axis})


@adjoint("log_softmax")
def _(g, node):
    s = np.exp(node.out)
    return (g - s * np.sum(g, axis=node.saved["axis"], keepdims=True),)


# ---------------------------------------------------------------------------
# reverse pass and verification


def backward(root: Tensor, tape: Tape | None = None) -> Gradients:
    """Accumulate adjoints of the scalar ``root`` into every node on its tape.

    The tape is consumed. A root that never touched the tape (a constant) yields
    all-zero gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape or tape or _ACTIVE.get()
    if tape is None:
        return Gradients({}, None)
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True
    if root.tape is not tape:
        return Gradients({}, tape)

    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.kind == "leaf":
            continue
        # interior adjoints are not needed once propagated
        del grads[nid]
        parts = ADJOINTS[node.kind](g, node)
        for inp, val, part in zip(node.inputs, node.values, parts):
            if inp is None or part is None:
                continue
            part = _unbroadcast(np.asarray(part, dtype=np.float64), val.shape)
            if not np.all(np.isfinite(part)):
                raise DomainError(f"{node.kind}: non-finite adjoint")
            prev = grads.get(inp)
            grads[inp] = part.copy() if prev is None else prev + part
    kept = {nid: g for nid, g in grads.items() if tape.nodes[nid].kind == "leaf"}
    kept.setdefault(root.node_id, np.ones(root.shape))
    return Gradients(kept, tape)


def value_and_grad(f: Callable[[Tensor], Tensor], theta) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``theta`` and its gradient with respect to ``theta``."""
    with Tape() as tape:
        p = tape.watch(theta)
        out = f(p)
    return out.item(), backward(out, tape)[p]


def numerical_gradient(f: Callable[[Tensor], Tensor], theta, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` along every coordinate of ``theta``."""
    theta = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    central = np.empty_like(theta)
    with no_tape():
        for i in np.ndindex(theta.shape):
            probe = theta.copy()
            probe[i] = theta[i] + step
            fp = _probe(f, probe)
            probe[i] = theta[i] - step
            fm = _probe(f, probe)
            central[i] = (fp - fm) / (2.0 * step)
    return central


def _probe(f, x: np.ndarray) -> float:
    try:
        v = f(Tensor(x)).item()
    except DomainError as e:
        raise DomainError(f"objective not evaluable at probe: {e}") from e
    if not np.isfinite(v):
        raise DomainError("objective returned a non-finite value at a probe")
    return v


def relative_error(analytic: np.ndarray, central: np.ndarray) -> float:
    err = np.abs(analytic - central) / np.maximum(1e-12, np.abs(central))
    return float(err.max()) if err.size else 0.0


def finite_difference_check(f: Callable[[Tensor], Tensor], theta, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central| / max(1e-12, |central|)."""
    _, analytic = value_and_grad(f, theta)
    return relative_error(analytic, numerical_gradient(f, theta, step))


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
