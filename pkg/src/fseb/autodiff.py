"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records primitive operations in execution order. Leaves are
created with :meth:`Tape.leaf`; every primitive below accepts :class:`Tensor`
objects or plain arrays (treated as constants). Operations on inputs that
carry no tape are evaluated eagerly and return an untaped tensor, so the same
forward code serves both differentiable and plain evaluation.

Example::

    tape = Tape()
    w = tape.leaf("w", [1.0, -2.0])
    loss = sum_(square(w))
    grads = backward(loss)      # {"w": array([ 2., -4.])}
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

Gradients = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (reuse after backward, mixed tapes)."""


class Tensor:
    """Dense float64 array, optionally bound to a node of a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tape_id(self) -> int | None:
        return self.node

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        taped = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{taped})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive applications. Single use."""

    nodes: list[_Node] = field(default_factory=list)
    leaf_params: dict[str, int] = field(default_factory=dict)
    consumed: bool = False
    _leaf_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def leaf(self, name: str, value) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if name in self.leaf_params:
            raise TapeError(f"duplicate leaf name {name!r}")
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf", (), lambda g: ()))
        self.leaf_params[name] = idx
        t = Tensor(np.array(value, dtype=np.float64), self, idx)
        self._leaf_shapes[name] = t.shape
        return t

    def _record(self, op, inputs, out, backward) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        idx = len(self.nodes)
        self.nodes.append(_Node(op, tuple(t.node if t.tape is self else None for t in inputs), backward))
        return Tensor(out, self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(op: str, tensors: tuple[Tensor, ...]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError(f"{op}: inputs live on different tapes")
            tape = t.tape
    return tape


def _emit(op, inputs, out, backward) -> Tensor:
    tape = _common_tape(op, inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(op, inputs, out, backward)


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    _check(a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0], "add", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar-mul", (a,), a.data * c, lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "elementwise-mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("elementwise-mul", (a, b), A * B, lambda g: (g * B, g * A))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _lse(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    if x.shape[-1] == 0:
        return np.full(x.shape[:-1], -np.inf)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def logsumexp(a) -> Tensor:
    """Log-sum-exp over the last axis."""
    a = as_tensor(a)
    _check(a.data.ndim >= 1 and a.shape[-1] >= 1, "log-sum-exp", a.shape)
    out = _lse(a.data)
    soft = np.exp(a.data - out[..., None])
    return _emit("log-sum-exp", (a,), out, lambda g: (g[..., None] * soft,))


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = as_tensor(a)
    _check(a.data.ndim >= 1 and a.shape[-1] >= 1, "log-softmax", a.shape)
    out = a.data - _lse(a.data)[..., None]
    soft = np.exp(out)
    return _emit(
        "log-softmax", (a,), out, lambda g: (g - soft * g.sum(axis=-1, keepdims=True),)
    )


def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.sum(a.data), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    _check(n > 0, "mean", shape)
    return _emit("mean", (a,), np.mean(a.data), lambda g: (np.full(shape, float(g) / n),))


def square(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _emit("square", (a,), A * A, lambda g: (2.0 * g * A,))


def quad_form(v, chol_L: np.ndarray) -> Tensor:
    """``sum_k v_k^T (L L^T)^{-1} v_k`` over the columns of ``v``.

    ``v`` is a length-M vector or an M x K matrix; ``chol_L`` is a constant
    lower-triangular factor and receives no gradient.
    """
    v = as_tensor(v)
    L = np.asarray(chol_L, dtype=np.float64)
    _check(
        L.ndim == 2 and L.shape[0] == L.shape[1] and v.data.ndim in (1, 2) and v.shape[0] == L.shape[0],
        "quadratic-form-with-fixed-factor",
        v.shape,
        L.shape,
    )
    w = solve_triangular(L, v.data, lower=True)
    out = np.sum(w * w)
    kinv_v = solve_triangular(L.T, w, lower=False)
    return _emit("quadratic-form-with-fixed-factor", (v,), out, lambda g: (2.0 * float(g) * kinv_v,))


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to every leaf of its tape.

    Leaves the loss does not depend on get a zero gradient. The tape is
    consumed.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TapeError("backward() needs a tensor recorded on a tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[loss.node] = np.ones_like(loss.data)
    for idx in range(loss.node, -1, -1):
        g = adj[idx]
        node = tape.nodes[idx]
        if g is None or not node.inputs:
            continue
        for src, gi in zip(node.inputs, node.backward(g)):
            if src is None or gi is None:
                continue
            adj[src] = gi if adj[src] is None else adj[src] + gi
    tape.consumed = True
    out: Gradients = {}
    for name, idx in tape.leaf_params.items():
        g = adj[idx]
        out[name] = np.zeros(tape._leaf_shapes[name]) if g is None else np.array(g, dtype=np.float64)
    return out


def finite_difference_grad(
    fn: Callable[[dict[str, np.ndarray]], float],
    theta: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> Gradients:
    """Central-difference gradient of ``fn`` at ``theta``, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    grads: Gradients = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(base))
            flat[i] = orig - step
            fm = float(fn(base))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite function value at {name}[{', '.join(str(int(j)) for j in np.unravel_index(i, arr.shape))}]"
                )
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads
