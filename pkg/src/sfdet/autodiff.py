"""Dense float64 tensors with a single-use reverse-mode tape.

Everything in this package runs on 64-bit floats: the point of the artifact
is numerical verification, and gradient checks need the headroom.  The tape
is single-threaded and rejects a second backward pass; higher-order
gradients are not supported anywhere.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (log of <=0, ...)."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (slow; used by tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "parents", "vjps", "leaf")

    def __init__(self, op, parents, vjps, leaf=None):
        self.op = op
        self.parents = parents  # node ids of grad-participating inputs
        self.vjps = vjps        # one callable per parent: grad_out -> grad_in
        self.leaf = leaf        # Tensor for leaf nodes, else None


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Records ops in execution (hence topological) order.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` exactly once.  Tensors created while no tape is
    active are plain values and never receive gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _register_leaf(self, t: "Tensor") -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), (), leaf=t))
        t._tape = self
        t.node_id = node_id
        return node_id

    def _id_for(self, t: "Tensor") -> Optional[int]:
        """Node id of ``t`` on this tape, registering leaves lazily."""
        if t._tape is self:
            return t.node_id
        if t.requires_grad:
            return self._register_leaf(t)
        return None

    def _push(self, op: str, parents, vjps) -> int:
        self.nodes.append(_Node(op, tuple(parents), tuple(vjps)))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss recorded on this tape.

        Sets ``.grad`` on every reachable leaf tensor (and clears it on
        leaves registered here but unreachable).  Returns the grads keyed
        by node id.  A tape can be differentiated only once.
        """
        if self._spent:
            raise RuntimeError("tape already differentiated; build a new tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss is not recorded on this tape")
        self._spent = True

        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            for pid, vjp in zip(node.parents, node.vjps):
                pg = vjp(g)
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        out: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self.nodes):
            if node.leaf is not None:
                node.leaf.grad = grads[nid]
                if grads[nid] is not None:
                    out[nid] = grads[nid]
        return out


def zero_grads(params) -> None:
    """Clear ``.grad`` on an iterable (or dict) of tensors before a new pass."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A dense float64 array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic --------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # shortcuts ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            vjps: Sequence[Optional[Callable]]) -> Tensor:
    """Wrap a computed forward value, recording on the active tape if needed."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    parents, pvjps = [], []
    for t, vjp in zip(inputs, vjps):
        if vjp is None:
            continue
        nid = tape._id_for(t)
        if nid is not None:
            parents.append(nid)
            pvjps.append(vjp)
    if parents:
        out._tape = tape
        out.node_id = tape._push(op, parents, pvjps)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast") from err
    return _finish(op, out, (a, b),
                   (lambda g, s=a.shape: _unbroadcast(vjp_a(g), s),
                    lambda g, s=b.shape: _unbroadcast(vjp_b(g), s)))


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _binary("mul", a, b, np.multiply,
                   lambda g: g * bd, lambda g: g * ad)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _binary("div", a, b, np.divide,
                   lambda g: g / bd, lambda g: -g * ad / (bd * bd))


def pow_(a, exponent: float) -> Tensor:
    """Elementwise power with a scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    if not p.is_integer():
        if np.any(a.data < 0):
            raise DomainError(f"op 'pow': negative base with non-integer exponent {p}")
    if p < 0 and np.any(a.data == 0):
        raise DomainError(f"op 'pow': zero base with negative exponent {p}")
    out = np.power(a.data, p)
    ad = a.data

    def vjp(g):
        return g * p * np.power(ad, p - 1.0) if p != 0.0 else np.zeros_like(ad)

    return _finish("pow", out, (a,), (vjp,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("op 'log': input must be strictly positive")
    ad = a.data
    return _finish("log", np.log(ad), (a,), (lambda g: g / ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _finish("exp", out, (a,), (lambda g: g * out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _finish("abs", np.abs(a.data), (a,), (lambda g: g * s,))


# ---------------------------------------------------------------------------
# reductions and structure


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _finish("sum", out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy() / count

    return _finish("mean", out, (a,), (vjp,))


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Maximum reduction; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), shape)
            full[idx] = np.asarray(g).reshape(())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            idx = np.argmax(a.data, axis=axis)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.asarray(gg, dtype=np.float64), axis=axis)
        return full

    return _finish("max", out, (a,), (vjp,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b),
                   (lambda g: g @ bd.T, lambda g: ad.T @ g))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,),
                   (lambda g: g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _finish("transpose", a.data.transpose(axes), (a,),
                   (lambda g: g.transpose(inv) if inv is not None else g.transpose(),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeError(f"op 'broadcast': cannot broadcast {a.shape} to {tuple(shape)}") from err
    orig = a.shape
    return _finish("broadcast", out, (a,), (lambda g: _unbroadcast(g, orig),))


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; gradient scatters back with accumulation."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _finish("take", a.data[idx], (a,), (vjp,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _finish("concat", out, tensors, tuple(make_vjp(i) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# composites


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the shift uses a detached max, which is
    exact because softmax is shift-invariant."""
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = log(sum_(exp(sub(a, shift)), axis=axis, keepdims=True))
    out = add(s, shift)
    if not keepdims:
        squeezed = list(a.shape)
        del squeezed[axis if axis >= 0 else a.ndim + axis]
        out = reshape(out, tuple(squeezed))
    return out


# ---------------------------------------------------------------------------
# scalar utilities shared by the losses


def min_max_scale(values) -> np.ndarray:
    """Affine rescale of a vector to [0, 1].

    A constant vector maps to all zeros, so downstream (1 - scaled)^beta
    weights degrade to a uniform 1.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("min_max_scale: empty vector")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def bernoulli_entropy(p) -> np.ndarray:
    """Entropy of Bernoulli(p) per element, nats, with 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise DomainError("bernoulli_entropy: probabilities must lie in [0, 1]")
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -q * np.log(q) - (1 - q) * np.log(1 - q)
    return out


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor,
                           h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per coordinate."""
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            probe = base.copy()
            probe.reshape(-1)[i] += sign * h
            val = f(Tensor(probe))
            val = val.item() if isinstance(val, Tensor) else float(val)
            flat[i] += sign * val
        flat[i] /= 2.0 * h
    return grad
