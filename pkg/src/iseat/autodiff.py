"""Reverse-mode differentiation over dense numpy arrays.

A :class:`Tensor` records the primitive that produced it together with its
parent tensors, so the computation record of any value is the DAG reachable
from it. :func:`grad` walks that record in reverse topological order and
returns exact gradients for an arbitrary list of inputs, parameters and data
alike.

Only the primitives needed for multilayer perceptrons and their losses are
provided.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "grad",
    "topological_order",
    "finite_diff_gradient",
    "gradcheck",
    "GradCheckReport",
    "relative_error",
]


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "grad")

    def __init__(self, data, parents: tuple = (), backward_fn=None, op: str = "leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        """Accumulate gradients of ``self`` into ``.grad`` of every leaf."""
        leaves = [t for t in topological_order(self) if not t.parents]
        grads = grad(self, leaves, seed)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __truediv__ = lambda a, b: div(a, b)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr, op="const")


def _make(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by primitive '{op}'")
    return Tensor(data, tuple(parents), backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    if not isinstance(a, Tensor):
        ref = b.data.dtype if isinstance(b, Tensor) else None
        a = Tensor(np.asarray(a, dtype=ref), op="const")
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype), op="const")
    return a, b


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- reductions and reshaping ---------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` for a 2-D tensor (or ``a[index]`` for 1-D)."""
    index = np.asarray(index)
    if a.ndim == 1:
        def backward(g):
            out = np.zeros_like(a.data)
            out[index] = g
            return (out,)
        return _make(a.data[index], (a,), backward, "pick")
    rows = np.arange(a.shape[0])
    if index.shape != (a.shape[0],):
        raise ShapeError(f"pick needs one index per row, got {index.shape} for {a.shape}")

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _make(a.data[rows, index], (a,), backward, "pick")


def logsumexp(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _make(out, (a,), backward, "logsumexp")


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a: Tensor, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# -- elementwise unary ----------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sign(a: Tensor) -> Tensor:
    # piecewise constant; derivative 0 everywhere, including at 0
    return _make(np.sign(a.data), (a,), lambda g: (np.zeros_like(a.data),), "sign")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "softplus": softplus,
}


# -- differentiation ------------------------------------------------------

def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` (contracted with ``seed``) w.r.t. each of ``wrt``.

    A tensor listed twice in ``wrt`` gets the same gradient twice; a tensor
    used several times inside the graph accumulates all its contributions.
    Inputs the output does not depend on get zeros.
    """
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")

    order = topological_order(output)
    targets = {id(t) for t in wrt}
    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {id(output): seed}
    for k in range(len(order) - 1, -1, -1):
        node = order[k]
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at node #{k} ('{node.op}', shape {node.shape})")
        if not any(id(p) in needed for p in node.parents):
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if id(p) not in needed:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for input '{t.op}' of shape {t.shape}")
        out.append(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# -- finite-difference oracle ---------------------------------------------

def finite_diff_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    p = np.array(point, dtype=np.float64)
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value near coordinate {i}")
        res[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: np.ndarray = field(repr=False)
    h: float

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def gradcheck(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> GradCheckReport:
    """Compare :func:`grad` of ``fn`` against central differences at ``point``."""
    p = np.array(point, dtype=np.float64)
    x = Tensor(p.copy())
    (analytic,) = grad(fn(x), [x])
    numeric = finite_diff_gradient(lambda q: fn(Tensor(q)).item(), p, h)
    errs = relative_error(analytic, numeric)
    return GradCheckReport(float(errs.max()) if errs.size else 0.0, errs, h)
