"""Small tape-based reverse-mode differentiation over numpy arrays.

Every primitive records a node holding its parents and a closure that maps
the upstream gradient onto each parent.  ``backward`` walks the recorded
graph once in reverse topological order and accumulates into ``.grad``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64
EPS = 1e-12


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    """Precision for tensors created afterwards; float64 is what the gradient checks assume."""
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=DEFAULT_DTYPE) if not isinstance(value, np.ndarray) else value
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scalar_mul(_lift(other, self.value.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.value.dtype), scalar_mul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _node(value, parents, backward, op) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=parents, _backward=backward, op=op)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=DEFAULT_DTYPE), requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value

    def backward(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        # skip the (often large) product for a constant left operand
        ga = g @ bv.T if a.requires_grad else None
        return ga, av.T @ g

    return _node(out, (a, b), backward, "matmul")


def spmatmul(m, x) -> Tensor:
    """Product of a constant (possibly sparse) matrix with a tensor."""
    x = _lift(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmatmul: incompatible shapes {m.shape} and {x.shape}")
    out = m @ x.value
    out = np.asarray(out)

    def backward(g):
        return (np.asarray(m.T @ g),)

    return _node(out, (x,), backward, "spmatmul")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(out, (a, b), backward, "mul")


def scalar_mul(x, c: float) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (g * c,)

    return _node(x.value * c, (x,), backward, "scalar_mul")


def concat(tensors, axis=-1) -> Tensor:
    """Concatenate along ``axis``; the default joins feature columns row by row."""
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def take_rows(x, index) -> Tensor:
    x = _lift(x)
    index = np.asarray(index, dtype=np.int64)
    out = x.value[index]

    def backward(g):
        grad = np.zeros_like(x.value)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(out, (x,), backward, "take_rows")


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, x.value, 0.0), (x,), backward, "relu")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = _sigmoid(np.atleast_1d(x.value)).reshape(x.shape)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward, "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), finite for any input."""
    x = _lift(x)
    v = x.value
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))

    def backward(g):
        return (g * _sigmoid(np.atleast_1d(-v)).reshape(v.shape),)

    return _node(out, (x,), backward, "log_sigmoid")


def softmax(x) -> Tensor:
    """Row-wise softmax with max subtraction."""
    x = _lift(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.value <= 0):
        raise ValueError("log: non-positive input; clamp before taking the log")

    def backward(g):
        return (g / x.value,)

    return _node(np.log(x.value), (x,), backward, "log")


def clamp_min(x, lo: float) -> Tensor:
    x = _lift(x)
    keep = x.value >= lo

    def backward(g):
        return (g * keep,)

    return _node(np.where(keep, x.value, lo), (x,), backward, "clamp_min")


def safe_log(x, lo: float = EPS) -> Tensor:
    return log(clamp_min(x, lo))


def mean_rows(x) -> Tensor:
    """Mean over the leading axis (rows)."""
    x = _lift(x)
    n = x.shape[0]
    if n == 0:
        raise ShapeError("mean_rows: empty input")

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(x.value.mean(axis=0), (x,), backward, "mean_rows")


def total(x) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (np.full_like(x.value, g),)

    return _node(np.asarray(x.value.sum()), (x,), backward, "sum")


def mean(x) -> Tensor:
    x = _lift(x)
    n = x.value.size

    def backward(g):
        return (np.full_like(x.value, g / n),)

    return _node(np.asarray(x.value.mean()), (x,), backward, "mean")


def sum_last(x) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (np.broadcast_to(g[..., None], x.shape).copy(),)

    return _node(x.value.sum(axis=-1), (x,), backward, "sum_last")


def l2_normalize(x, eps: float = EPS) -> Tensor:
    """Row-wise x / max(|x|, eps); exact scale invariance for any row above eps."""
    x = _lift(x)
    raw = np.sqrt((x.value ** 2).sum(axis=-1, keepdims=True))
    clamped = raw < eps
    norm = np.where(clamped, eps, raw)
    out = x.value / norm

    def backward(g):
        radial = np.where(clamped, 0.0, (g * out).sum(axis=-1, keepdims=True))
        return ((g - out * radial) / norm,)

    return _node(out, (x,), backward, "l2_normalize")


def bilinear(e, w, r) -> Tensor:
    """Scores e_i^T W r for every row e_i of ``e``."""
    e, w, r = _lift(e), _lift(w), _lift(r)
    if w.value.ndim != 2 or e.shape[-1] != w.shape[0] or w.shape[1] != r.shape[-1] or r.value.ndim != 1:
        raise ShapeError(f"bilinear: incompatible shapes e={e.shape} W={w.shape} r={r.shape}")
    wr = w.value @ r.value
    out = e.value @ wr

    def backward(g):
        ge = np.multiply.outer(g, wr)
        et_g = g @ e.value if e.value.ndim == 2 else g * e.value
        return ge, np.outer(et_g, r.value), w.value.T @ et_g

    return _node(out, (e, w, r), backward, "bilinear")


def grad_scale(x, factor: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``factor``."""
    x = _lift(x)

    def backward(g):
        return (g * factor,)

    return _node(x.value, (x,), backward, "grad_scale")


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=parent.value.dtype).reshape(parent.shape)


# ---------------------------------------------------------------- checkpoint

_MAGIC = b"GDACKPT1\n"


def save_tensors(path, tensors: dict, meta: str = "") -> None:
    """Write named arrays as ``name ndim dims...`` headers followed by raw <f8 bytes."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        meta_bytes = meta.encode()
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)

    def read_q(count=1):
        nonlocal pos
        vals = struct.unpack_from(f"<{count}Q", data, pos)
        pos += 8 * count
        return vals

    (mlen,) = read_q()
    meta = data[pos:pos + mlen].decode()
    pos += mlen
    (count,) = read_q()
    out = {}
    for _ in range(count):
        (nlen,) = read_q()
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = read_q()
        shape = read_q(ndim) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        out[name] = arr
    return out, meta

