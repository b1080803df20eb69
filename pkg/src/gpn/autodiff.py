"""Dense float64 tensors with reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Value` graph nodes. Every forward
op records its parents together with a closure mapping the output gradient to
the parent gradients. There is no broadcasting: operands must share a shape,
except that 0-d (scalar) operands combine with anything.

Spiking layers use the ``(features, batch)`` column layout so that a linear
layer is ``matmul(W, x)`` with ``W`` of shape ``(out, in)``.
"""

from __future__ import annotations

import enum
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class ActivationMode(enum.Enum):
    HARD = "hard"  # Heaviside forward, arctan surrogate backward
    SMOOTH = "smooth"  # arctan sigmoid forward and backward (gradient checks only)


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph edges inside the block (evaluation passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced in forward pass")
    return arr


class Value:
    """A node in the differentiation graph."""

    __slots__ = ("data", "grad", "parents", "requires_grad", "detached", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: Sequence[tuple["Value", Callable[[np.ndarray], np.ndarray]]] = (),
                 detached: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.parents = tuple(p for p in parents if p[0].requires_grad) if _grad_enabled else ()
        self.requires_grad = requires_grad or bool(self.parents)
        self.detached = detached
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    # operator sugar; everything routes through the functional ops below
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

    def __neg__(self):
        return mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def parameter(data, name: str | None = None) -> Value:
    return Value(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _check_same(a: Value, b: Value, op: str):
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar operands are ever broadcast
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same(a, b, "add")
    return Value(a.data + b.data, parents=(
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same(a, b, "sub")
    return Value(a.data - b.data, parents=(
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_same(a, b, "mul")
    return Value(a.data * b.data, parents=(
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Value:
    a = as_value(a)
    y = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return Value(y, parents=((a, lambda g: g * y * (1.0 - y)),))


def mean_over_axis(a, axis: int | None = None) -> Value:
    """Mean over one axis, or over all entries when ``axis`` is None."""
    a = as_value(a)
    if axis is None:
        n = a.data.size
        return Value(a.data.mean(), parents=((a, lambda g: np.full(a.shape, g / n)),))
    n = a.shape[axis]

    def grad(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / n

    return Value(a.data.mean(axis=axis), parents=((a, grad),))


def sum_all(a) -> Value:
    a = as_value(a)
    return Value(a.data.sum(), parents=((a, lambda g: np.full(a.shape, g)),))


def elementwise(op: str, *args, **kwargs) -> Value:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``sigmoid``, ``mean_over_axis``."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid,
             "mean_over_axis": mean_over_axis}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def stack_mean(values: Sequence[Value]) -> Value:
    """Mean of equally shaped values, e.g. logits averaged over time steps."""
    if not values:
        raise ShapeError("stack_mean of an empty sequence")
    total = values[0]
    for v in values[1:]:
        total = add(total, v)
    return mul(1.0 / len(values), total)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Value(a.data @ b.data, parents=(
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


# ---------------------------------------------------------------------------
# spiking


def surrogate(u: np.ndarray) -> np.ndarray:
    """Arctan sigmoid (1/pi) atan(pi u) + 1/2."""
    return np.arctan(np.pi * u) / np.pi + 0.5


def surrogate_grad(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + (np.pi * u) ** 2)


def spike_activation(u, mode: ActivationMode = ActivationMode.HARD) -> Value:
    """Fire where ``u >= 0``; backward always uses the arctan derivative."""
    u = as_value(u)
    if mode is ActivationMode.HARD:
        out = (u.data >= 0).astype(DTYPE)
    else:
        out = surrogate(u.data)
    return Value(out, parents=((u, lambda g: g * surrogate_grad(u.data)),))


# ---------------------------------------------------------------------------
# detach


_detach_tape: list | None = None
_detach_replay: Iterable | None = None


def detach(v) -> Value:
    """Same value, no gradient to ``v``'s ancestors."""
    v = as_value(v)
    data = v.data
    if _detach_replay is not None:
        data = next(_detach_replay)
    if _detach_tape is not None:
        _detach_tape.append(data.copy())
    return Value(data, requires_grad=False, detached=True)


@contextmanager
def record_detached():
    """Collect every value passed through :func:`detach` during the block."""
    global _detach_tape
    prev, _detach_tape = _detach_tape, []
    try:
        yield _detach_tape
    finally:
        _detach_tape = prev


@contextmanager
def replay_detached(values: Sequence[np.ndarray]):
    """Substitute recorded values for detached nodes, in call order.

    Used by finite-difference checks: holding detached quantities at their
    unperturbed values makes the numerical derivative match what backward
    computes with those edges cut.
    """
    global _detach_replay
    prev, _detach_replay = _detach_replay, iter(values)
    try:
        yield
    finally:
        _detach_replay = prev


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, labels) -> Value:
    """Batch-mean cross entropy.

    ``logits`` is ``(n_class,)`` with an integer label, or ``(n_class, N)``
    with ``N`` labels.
    """
    logits = as_value(logits)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[:, None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_class, n = z.shape
    if n_class < 2:
        raise ShapeError("need at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n_class):
        raise IndexError("label out of range")
    zmax = z.max(axis=0, keepdims=True)
    shifted = z - zmax
    logsum = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logsum
    cols = np.arange(n)
    loss = -logp[labels, cols].mean()
    probs = np.exp(logp)

    def grad(g):
        d = probs.copy()
        d[labels, cols] -= 1.0
        d *= g / n
        return d[:, 0] if single else d

    return Value(loss, parents=((logits, grad),))


def softmax(logits) -> Value:
    """Softmax over axis 0 (classes) of ``(n_class,)`` or ``(n_class, N)`` logits."""
    logits = as_value(logits)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)

    def grad(g):
        return p * (g - (g * p).sum(axis=0, keepdims=True))

    return Value(p, parents=((logits, grad),))


def nll_of_probs(probs, labels) -> Value:
    """Batch-mean ``-log p[label]`` for already normalised ``(n_class, N)`` probabilities."""
    probs = as_value(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    p = probs.data if probs.data.ndim == 2 else probs.data[:, None]
    n = p.shape[1]
    if np.any(labels < 0) or np.any(labels >= p.shape[0]):
        raise IndexError("label out of range")
    cols = np.arange(n)
    picked = p[labels, cols]

    def grad(g):
        d = np.zeros_like(p)
        d[labels, cols] = -g / (n * picked)
        return d.reshape(probs.shape)

    return Value(-np.log(picked).mean(), parents=((probs, grad),))


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Value) -> list[Value]:
    # iterative DFS; unrolled BPTT graphs are far deeper than the recursion limit
    order: list[Value] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = finished
    stack: list[tuple[Value, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            state[key] = 1
        if node.detached or i >= len(node.parents):
            state[key] = 2
            order.append(node)
            continue
        stack.append((node, i + 1))
        parent = node.parents[i][0]
        pstate = state.get(id(parent))
        if pstate == 1:
            raise GraphError("cycle detected in computation graph")
        if pstate is None:
            stack.append((parent, 0))
    return order


def backward(loss: Value) -> dict[Value, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Returns a map from each reachable ``requires_grad`` leaf to its gradient.
    Intermediate nodes keep their ``.grad`` too, which is how gradients with
    respect to hidden inputs are read out.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, rule in node.parents:
            pg = np.asarray(rule(g), dtype=DTYPE).reshape(parent.shape)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return leaves


def grad_of(loss: Value, params: Sequence[Value]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each of ``params``; zeros where unreachable."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gout = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn()
        flat[k] = orig - h
        fm = fn()
        flat[k] = orig
        gout[k] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


__all__ = [
    "ActivationMode", "DTYPE", "GraphError", "NonFiniteError", "ShapeError", "Value",
    "add", "as_value", "backward", "detach", "elementwise", "grad_of", "matmul",
    "mean_over_axis", "mul", "nll_of_probs", "no_grad", "numerical_grad", "parameter", "record_detached",
    "relative_error", "replay_detached", "sigmoid", "softmax", "softmax_cross_entropy",
    "spike_activation", "stack_mean", "sub", "sum_all", "surrogate", "surrogate_grad",
]
