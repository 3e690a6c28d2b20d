"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how frozen-parameter inference runs.
"""

from __future__ import annotations

import math

import numpy as np


class StaleTapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.param_versions: dict[int, tuple[Param, int]] = {}
        self.output: Tensor | None = None

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, node: "Tensor"):
        self.nodes.append(node)
        for p in node.parents:
            if isinstance(p, Param) and id(p) not in self.param_versions:
                self.param_versions[id(p)] = (p, p.version)

    def check_fresh(self):
        for p, v in self.param_versions.values():
            if p.version != v:
                raise StaleTapeError(f"parameter {p.name!r} changed after the forward pass")

    def params(self) -> list["Param"]:
        return [p for p, _ in self.param_versions.values()]


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o)))

    def __rsub__(self, o):
        return add(as_tensor(o), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self, None)


class Param(Tensor):
    """Trainable tensor; ``version`` bumps on every in-place update."""

    __slots__ = ("name", "version")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True))
        self.name = name
        self.version = 0

    def assign(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {values.shape} != {self.data.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.name}: non-finite values")
        self.data = values.copy()
        self.version += 1


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor(data)
    out = Tensor(data, parents, backward_fn)
    tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def relu(a) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _node(out, (a,), bw)


def tanh(a) -> Tensor:
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: a._accumulate(g * (1.0 - t * t)))


def exp(a) -> Tensor:
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: a._accumulate(g * e))


def log(a) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def absolute(a) -> Tensor:
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: a._accumulate(g * s))


def square(a) -> Tensor:
    return _node(a.data ** 2, (a,), lambda g: a._accumulate(2.0 * g * a.data))


# --- reductions and shape ----------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def getitem(a, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(a.data[idx], (a,), bw)


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def softmax(a, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (a,), bw)


def log_softmax(a, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        a._accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), bw)


# --- tape driver -------------------------------------------------------------

def backward(tape: Tape, output_grad=None, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Run the reverse pass over ``tape`` and return ``{param name: gradient}``.

    Gradients also accumulate into each parameter's ``grad`` (which this call
    resets first). Raises :class:`StaleTapeError` when any parameter changed
    since the forward pass.
    """
    tape.check_fresh()
    out = output if output is not None else tape.output
    if out is None:
        if not tape.nodes:
            raise ValueError("empty tape")
        out = tape.nodes[-1]
    for p in tape.params():
        p.grad = None
    for n in tape.nodes:
        n.grad = None
    if output_grad is None:
        output_grad = np.ones_like(out.data)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != out.shape:
        raise ValueError(f"output gradient shape {output_grad.shape} != {out.shape}")
    out.grad = output_grad.copy()
    for n in reversed(tape.nodes):
        if n.grad is not None and n.backward_fn is not None:
            n.backward_fn(n.grad)
    return {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in tape.params()}
