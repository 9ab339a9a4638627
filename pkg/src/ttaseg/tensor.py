"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-tape engine: every operation returns a new ``Tensor`` that
remembers its parents and a backward closure. ``Tensor.backward()`` visits
the recorded nodes exactly once, in reverse creation order, so parents are
always processed after all of their children. Forward results never alias
or mutate their inputs; the tape is rebuilt on every forward pass and
consumed by ``backward``.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "DomainError",
    "as_tensor",
    "concat",
    "softmax",
    "log_softmax",
    "no_grad",
    "AdamState",
    "adam_step",
]

_seq = itertools.count()
_grad_enabled = True


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure-inference forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches are exact where selected
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, s, 1.0 - s)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Dense float64 array with an optional gradient record.

    Leaves are built with the public constructor (which copies its input);
    operation results are attached to the tape via :meth:`_node`. Gradients
    accumulate into ``.grad`` during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._consumed = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        t.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        t.grad = None
        if t.requires_grad:
            t._parents = parents
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        t._op = op
        t._seq = next(_seq)
        t._consumed = False
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A constant copy sharing no storage and no graph."""
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            # copy: g may alias another node's gradient buffer
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._node(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))

        return Tensor._node(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if np.any(b.data == 0.0):
            raise DomainError(f"div: zero divisor (denominator produced by op {b._op!r})")

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._node(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self

        def bw(g):
            a._accum(-g)

        return Tensor._node(-a.data, (a,), bw, "neg")

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("power: exponent must be a Python scalar")
        p = float(p)
        a = self
        x = a.data
        if p == 2.0:
            out, dfn = x * x, lambda: 2.0 * x
        elif p == 3.0:
            out, dfn = x * x * x, lambda: 3.0 * x * x
        elif p == 0.5:
            if np.any(x < 0):
                raise DomainError(f"power: negative base under sqrt (base from op {a._op!r})")
            root = np.sqrt(x)
            out, dfn = root, lambda: 0.5 / root
        else:
            if p != int(p) and np.any(x < 0):
                raise DomainError(f"power: negative base with fractional exponent {p} (base from op {a._op!r})")
            out, dfn = x**p, lambda: p * x ** (p - 1.0)

        def bw(g):
            a._accum(g * dfn())

        return Tensor._node(out, (a,), bw, "pow")

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = as_tensor(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul: operands must be at least 2-D")
        if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(
                f"matmul: batch dimensions must match exactly, got {a.data.shape} @ {b.data.shape}"
            )
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ValueError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")

        def bw(g):
            if a.requires_grad:
                a._accum(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

        return Tensor._node(a.data @ b.data, (a, b), bw, "matmul")

    # -- elementwise transcendentals ------------------------------------

    def log(self):
        a = self
        if np.any(a.data <= 0.0):
            raise DomainError(
                f"log: nonpositive input (min={a.data.min():.6g}, produced by op {a._op!r})"
            )

        def bw(g):
            a._accum(g / a.data)

        return Tensor._node(np.log(a.data), (a,), bw, "log")

    def exp(self):
        a = self
        out = np.exp(a.data)

        def bw(g):
            a._accum(g * out)

        return Tensor._node(out, (a,), bw, "exp")

    def sigmoid(self):
        a = self
        out = _stable_sigmoid(a.data)

        def bw(g):
            a._accum(g * out * (1.0 - out))

        return Tensor._node(out, (a,), bw, "sigmoid")

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def bw(g):
            a._accum(g * (1.0 - out * out))

        return Tensor._node(out, (a,), bw, "tanh")

    def gelu(self):
        """tanh-form GELU as one node; smooth everywhere."""
        a = self
        x = a.data
        c = 0.7978845608028654  # sqrt(2/pi)
        inner = c * (x + 0.044715 * x * x * x)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
            a._accum(g * d)

        return Tensor._node(out, (a,), bw, "gelu")

    def softplus(self):
        a = self

        def bw(g):
            a._accum(g * _stable_sigmoid(a.data))

        return Tensor._node(np.logaddexp(0.0, a.data), (a,), bw, "softplus")

    def sin(self):
        a = self

        def bw(g):
            a._accum(g * np.cos(a.data))

        return Tensor._node(np.sin(a.data), (a,), bw, "sin")

    def cos(self):
        a = self

        def bw(g):
            a._accum(-g * np.sin(a.data))

        return Tensor._node(np.cos(a.data), (a,), bw, "cos")

    def clip(self, lo: float, hi: float):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def bw(g):
            a._accum(g * inside)

        return Tensor._node(np.clip(a.data, lo, hi), (a,), bw, "clip")

    # -- reductions and shape ops ---------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._node(out, (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            a._accum(g.reshape(old))

        return Tensor._node(a.data.reshape(shape), (a,), bw, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        a = self
        inv = tuple(np.argsort(axes))

        def bw(g):
            a._accum(g.transpose(inv))

        return Tensor._node(a.data.transpose(axes), (a,), bw, "transpose")

    # -- backward --------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable requires-grad tensor.

        The loss must be a scalar on a live graph; the graph is released
        afterwards and a second call on the same loss raises.
        """
        if self.data.shape != ():
            raise ValueError(f"backward: loss must be a scalar, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward: graph already consumed by a previous backward")
        self._consumed = True
        if not self.requires_grad:
            return
        nodes = [self]
        seen = {id(self)}
        stack = [self]
        while stack:
            for p in stack.pop()._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    nodes.append(p)
                    stack.append(p)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self.grad = np.ones((), dtype=np.float64)
        for n in nodes:
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)
        for n in nodes:
            n._parents = ()
            n._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            if p.requires_grad:
                p._accum(piece)

    return Tensor._node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Numerically stable log of the temperature-scaled softmax.

    The max shift is detached; softmax is invariant to additive shifts so
    the gradient is unaffected.
    """
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    y = x * (1.0 / float(temperature))
    shifted = y - Tensor(np.max(y.data, axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    y = x * (1.0 / float(temperature))
    shifted = y - Tensor(np.max(y.data, axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates for one parameter group."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update over a named parameter group; clears gradients.

    Weight decay is classic L2 added to the gradient before the moment
    updates (coupled form).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
            if m.shape != p.data.shape:
                raise ValueError(f"adam_step: stale moments for {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def zero_grads(params: Mapping[str, Tensor]):
    for p in params.values():
        p.grad = None
