"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly while the forward computation runs (define-by-run)
and is discarded once :func:`backward` has produced the adjoints.  Every node
is a :class:`Value` holding an immutable ``numpy.ndarray`` payload.

Example:
    >>> w = Value([0.0, 0.0], requires_grad=True)
    >>> grads = backward(sigmoid(w).sum())
    >>> grads[w]
    array([0.25, 0.25])
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import special

Tensor = np.ndarray


class Value:
    """A node of the differentiation graph.

    Attributes:
        data: Forward payload (float64 array, treated as immutable).
        grad: Adjoint written by the last :func:`backward` call for leaves.
        requires_grad: Whether adjoints flow into this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        # (parent, vjp) pairs; vjp maps the output adjoint to the parent adjoint
        self._parents = tuple(_parents)
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value({self.data!r}{flag})"

    def numpy(self) -> Tensor:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

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

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    """Wrap arrays and scalars as constant nodes; pass Values through."""
    if isinstance(x, Value):
        return x
    return Value(x)


def to_numpy(x) -> Tensor:
    if isinstance(x, Value):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(out: Tensor, name: str) -> None:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite result in '{name}'")


def _node(out, name: str, parents: Sequence[tuple[Value, Callable]]) -> Value:
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, name)
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Value(out, requires_grad=bool(live), _parents=live, op=name)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum ``g`` over the axes that broadcasting added or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _node(a.data + b.data, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _node(a.data - b.data, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _node(a.data * b.data, "mul", [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(out, "div", [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a) -> Value:
    a = as_value(a)
    return _node(-a.data, "neg", [(a, lambda g: -g)])


def matmul(a, b) -> Value:
    """Matrix product with numpy's batching rules (both operands ndim >= 2)."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2; reshape vectors first")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    return _node(out, "matmul", [
        (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)),
        (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)),
    ])


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def sigmoid(a) -> Value:
    a = as_value(a)
    s = special.expit(a.data)
    return _node(s, "sigmoid", [(a, lambda g: g * s * (1.0 - s))])


def tanh(a) -> Value:
    a = as_value(a)
    t = np.tanh(a.data)
    return _node(t, "tanh", [(a, lambda g: g * (1.0 - t * t))])


def softplus(a) -> Value:
    a = as_value(a)
    return _node(np.logaddexp(0.0, a.data), "softplus",
                 [(a, lambda g: g * special.expit(a.data))])


def log(a) -> Value:
    a = as_value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", [(a, lambda g: g / a.data)])


def exp(a) -> Value:
    a = as_value(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node(e, "exp", [(a, lambda g: g * e)])


def sqrt(a) -> Value:
    a = as_value(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)
    return _node(r, "sqrt", [(a, lambda g: g * 0.5 / r)])


def square(a) -> Value:
    a = as_value(a)
    return _node(a.data * a.data, "square", [(a, lambda g: 2.0 * g * a.data)])


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Value:
    """Clip to ``[lo, hi]``; slope 1 strictly inside, 0 on and beyond the edges."""
    a = as_value(a)
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), "clamp", [(a, lambda g: g * inside)])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: Tensor, shape: tuple, axis, keepdims: bool) -> Tensor:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, "sum", [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims))])


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return _node(out, "mean",
                 [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims) / count)])


def logsumexp(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = special.logsumexp(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        full = _expand_reduced(out, a.shape, axis, keepdims)
        return _expand_reduced(g, a.shape, axis, keepdims) * np.exp(a.data - full)

    return _node(out, "logsumexp", [(a, vjp)])


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in vals], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    parents = []
    for v, lo, hi in zip(vals, bounds[:-1], bounds[1:]):
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(lo, hi)
        parents.append((v, lambda g, idx=tuple(idx): g[idx]))
    return _node(out, "concat", parents)


def slice_(a, index) -> Value:
    """Basic or advanced indexing; repeated indices accumulate on backward."""
    a = as_value(a)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return full

    return _node(a.data[index], "slice", [(a, vjp)])


def broadcast(a, shape) -> Value:
    a = as_value(a)
    return _node(np.broadcast_to(a.data, shape), "broadcast",
                 [(a, lambda g: _unbroadcast(g, a.shape))])


def reshape(a, shape) -> Value:
    a = as_value(a)
    return _node(a.data.reshape(shape), "reshape", [(a, lambda g: g.reshape(a.shape))])


def transpose(a) -> Value:
    """Swap the last two axes."""
    a = as_value(a)
    return _node(np.swapaxes(a.data, -1, -2), "transpose",
                 [(a, lambda g: np.swapaxes(g, -1, -2))])


def where(mask, a, b) -> Value:
    a, b = as_value(a), as_value(b)
    mask = np.asarray(mask, dtype=bool)
    return _node(np.where(mask, a.data, b.data), "where", [
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    ])


# ---------------------------------------------------------------------------
# small dense linear algebra (single matrices, used by the Gaussian models)
# ---------------------------------------------------------------------------

def solve(a, b) -> Value:
    """``x = a^{-1} b`` for a square ``a`` and matrix ``b``."""
    a, b = as_value(a), as_value(b)
    x = np.linalg.solve(a.data, b.data)

    def vjp_b(g):
        return np.linalg.solve(a.data.T, g)

    def vjp_a(g):
        return -np.linalg.solve(a.data.T, g) @ x.T

    return _node(x, "solve", [(a, vjp_a), (b, vjp_b)])


def cholesky(a) -> Value:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    The adjoint is symmetric, so the symmetric and the raw parameterisations
    of ``a`` receive the same gradient.
    """
    a = as_value(a)
    try:
        low = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc

    def vjp(g):
        phi = np.tril(low.T @ g)
        phi[np.diag_indices_from(phi)] *= 0.5
        # L^{-T} phi L^{-1}
        left = sla.solve_triangular(low, phi, trans="T", lower=True)
        s = sla.solve_triangular(low, left.T, trans="T", lower=True).T
        return 0.5 * (s + s.T)

    return _node(low, "cholesky", [(a, vjp)])


# ---------------------------------------------------------------------------
# gradient control
# ---------------------------------------------------------------------------

def stop_gradient(a) -> Value:
    """Same payload, but the result is a constant for the backward pass."""
    a = as_value(a)
    return Value(a.data, requires_grad=False, op="stop_gradient")


def custom_scalar(value: float, inputs: Sequence[Value], grads: Sequence) -> Value:
    """Scalar node with a prescribed value and prescribed input gradients.

    Used where the forward value comes from an estimator (e.g. an annealed
    log-partition function) while its gradient comes from another one.
    """
    parents = []
    for v, gr in zip(inputs, grads):
        gr = np.asarray(gr, dtype=np.float64)
        if gr.shape != v.shape:
            raise ValueError(f"gradient shape {gr.shape} != input shape {v.shape}")
        parents.append((v, lambda g, gr=gr: g * gr))
    return _node(np.float64(value), "custom", parents)


_OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus, "log": log, "exp": exp,
    "sum": sum_, "mean": mean, "logsumexp": logsumexp, "clamp": clamp,
    "concat": lambda *xs, **kw: concat(xs, **kw), "slice": slice_, "broadcast": broadcast,
    "reshape": reshape, "transpose": transpose, "sqrt": sqrt, "square": square,
    "solve": solve, "cholesky": cholesky,
}


def forward_op(name: str, inputs: Sequence, attrs: dict | None = None) -> Value:
    """Apply a registered op by name (``attrs`` are keyword arguments)."""
    try:
        fn = _OPS[name]
    except KeyError:
        raise ValueError(f"unknown op '{name}'") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Value) -> dict[Value, Tensor]:
    """Reverse-mode sweep from a scalar root.

    Returns a mapping from every ``requires_grad`` leaf reachable from ``root``
    to its gradient.  Each leaf's ``.grad`` is overwritten (not accumulated),
    so repeated calls on the same graph give identical results.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    adj = {id(root): np.ones_like(root.data)}
    grads: dict[Value, Tensor] = {}
    for node in reversed(_toposort(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                g = np.array(np.broadcast_to(g, node.shape), dtype=np.float64)
                node.grad = g
                grads[node] = g
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + contrib
            else:
                adj[key] = contrib
    return grads


def grad(f: Callable[..., Value], params: Sequence) -> list[Tensor]:
    """Gradients of scalar ``f(*values)`` with respect to each of ``params``."""
    leaves = [Value(p, requires_grad=True) for p in params]
    out = backward(f(*leaves))
    return [out.get(v, np.zeros(v.shape)) for v in leaves]


def grad_check(f: Callable[..., Value], point: Sequence, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes one Value per entry of ``point`` and returns a scalar Value.
    The error per coordinate is ``|ad - fd| / (|fd| + 1e-8)``.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    ad = grad(f, point)
    worst = 0.0
    for k, p in enumerate(point):
        flat = p.reshape(-1)
        for i in range(flat.size):
            hi = [q.copy() for q in point]
            lo = [q.copy() for q in point]
            hi[k].reshape(-1)[i] += step
            lo[k].reshape(-1)[i] -= step
            f_hi = f(*[Value(q) for q in hi]).item()
            f_lo = f(*[Value(q) for q in lo]).item()
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise FloatingPointError("non-finite function value at probe point")
            fd = (f_hi - f_lo) / (2.0 * step)
            err = abs(ad[k].reshape(-1)[i] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst


class Adam:
    """Adam over a list of leaf Values; updates replace each leaf's payload."""

    def __init__(self, params: Iterable[Value], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: dict[Value, Tensor], ascent: bool = False) -> None:
        self.t += 1
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.data + sign * upd
            new.setflags(write=False)
            p.data = new
