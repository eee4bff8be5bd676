"""Dense double-precision tensors with reverse-mode differentiation.

Only the operations used by the encoder/loss graph are provided: matrix
products (dense and sparse-by-dense), elementwise nonlinearities, column
concatenation, row gathers and reductions.  Every op returns a new
:class:`Tensor`; parents and a backward closure are recorded so that
:func:`backward` can walk the graph in reverse topological order.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

DTYPE = np.float64
LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.requires_grad or bool(self.parents)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.tracked)
    if tracked:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    # sum out dimensions that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class ParamTape:
    """Ordered registry of named parameters and their gradient slots."""

    def __init__(self, params=None):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (params or {}).items():
            self.register(name, value)

    def register(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def reset(self):
        for g in self.grads.values():
            g.fill(0.0)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()


def backward(loss: Tensor, tape: ParamTape, seed_grad: float = 1.0):
    """Accumulate d(loss)/d(param) into ``tape.grads`` for every registered param."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ContractError("backward called on an untracked scalar")

    order, seen = [], set()
    stack = [(loss, False)]
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
            if p.tracked and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.full(loss.shape, seed_grad, dtype=DTYPE)}
    by_param = {id(t): name for name, t in tape.items()}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        name = by_param.get(id(node))
        if name is not None:
            tape.grads[name] += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def _softplus(v):
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    slope = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _result(_softplus(x.data), (x,), lambda g: (g * slope,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped to ``floor`` (zero gradient below it)."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    live = x.data >= floor
    return _result(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.tracked else None
        gb = a.data.T @ g if b.tracked else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def spmm(op, dense) -> Tensor:
    """Product of a constant scipy sparse matrix with a dense tensor."""
    dense = as_tensor(dense)
    if dense.data.ndim != 2 or op.shape[1] != dense.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {op.shape} x {dense.shape}")
    op_t = op.T.tocsr()
    out = np.asarray(op @ dense.data, dtype=DTYPE)
    return _result(out, (dense,), lambda g: (np.asarray(op_t @ g, dtype=DTYPE),))


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    split = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), bw)


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), bw)


def rowwise_dot(a, b) -> Tensor:
    """Inner product of matching rows; returns a length-n vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot shape mismatch: {a.shape} vs {b.shape}")
    return _result(
        np.einsum("ij,ij->i", a.data, b.data),
        (a, b),
        lambda g: (g[:, None] * b.data, g[:, None] * a.data),
    )


def total(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(x.data.size, 1)
    return _result(
        np.array(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),)
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))
